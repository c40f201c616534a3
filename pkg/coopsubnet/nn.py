"""Layers, Xavier initialization and the loss functions used by every variant."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import numpy.typing as npt

from coopsubnet.diffcore import (
    ContractError,
    Graph,
    Node,
    ShapeError,
    Tensor,
    rng_stream,
    tensor_create,
)
from coopsubnet.models import Mode

LOGGER = logging.getLogger(__name__)

RELATIVE_LOSS_FLOOR = 1e-8
BATCH_NORM_MOMENTUM = 0.1
BATCH_NORM_EPS = 1e-5


@dataclass(slots=True)
class Parameter:
    """A named tensor block owned by a layer. ``decay`` marks weights for the L2 penalty."""

    name: str
    value: Tensor
    decay: bool = False

    def assign(self, value: npt.ArrayLike) -> None:
        array = np.asarray(value, dtype=np.float64)
        if array.shape != self.value.shape:
            raise ShapeError(
                f"{self.name}: cannot assign shape {list(array.shape)} "
                f"to {list(self.value.shape)}"
            )
        self.value = tensor_create(array.shape, array)


class Layer(Protocol):
    name: str

    def forward(
        self, graph: Graph, x: Node, mode: Mode, rng: np.random.Generator | None = None
    ) -> Node: ...

    def parameters(self) -> tuple[Parameter, ...]: ...

    def buffers(self) -> tuple[Parameter, ...]: ...


def xavier_init(
    fan_in: int,
    fan_out: int,
    seed: int,
    *,
    shape: Sequence[int] | None = None,
    stream: str = "xavier",
) -> Tensor:
    """Uniform samples in ``±sqrt(6 / (fan_in + fan_out))``, reproducible per (seed, stream)."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError(f"fan_in and fan_out must be >= 1, got {fan_in} and {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    dims = tuple(shape) if shape is not None else (fan_in, fan_out)
    samples = rng_stream(seed, stream).uniform(-bound, bound, size=dims)
    return tensor_create(dims, samples)


class _Stateless:
    name: str

    def parameters(self) -> tuple[Parameter, ...]:
        return ()

    def buffers(self) -> tuple[Parameter, ...]:
        return ()


class Dense:
    def __init__(self, name: str, fan_in: int, fan_out: int, seed: int) -> None:
        self.name = name
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = Parameter(
            f"{name}.weight",
            xavier_init(fan_in, fan_out, seed, stream=f"{name}.weight"),
            decay=True,
        )
        self.bias = Parameter(f"{name}.bias", tensor_create([fan_out], 0.0))

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        if x.value.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(
                f"{self.name}: expected input [batch x {self.fan_in}], got {list(x.shape)}"
            )
        weight = graph.parameter(self.weight.name, self.weight.value)
        bias = graph.parameter(self.bias.name, self.bias.value)
        return graph.add(graph.matmul(x, weight), bias)

    def parameters(self) -> tuple[Parameter, ...]:
        return self.weight, self.bias

    def buffers(self) -> tuple[Parameter, ...]:
        return ()


class Conv2D:
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        seed: int,
        *,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        self.name = name
        self.stride = stride
        self.padding = padding
        receptive = kernel * kernel
        self.weight = Parameter(
            f"{name}.weight",
            xavier_init(
                in_channels * receptive,
                out_channels * receptive,
                seed,
                shape=(out_channels, in_channels, kernel, kernel),
                stream=f"{name}.weight",
            ),
            decay=True,
        )
        self.bias = Parameter(f"{name}.bias", tensor_create([out_channels], 0.0))

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        out_channels, _, kernel, _ = self.weight.value.shape
        return (
            out_channels,
            (height + 2 * self.padding - kernel) // self.stride + 1,
            (width + 2 * self.padding - kernel) // self.stride + 1,
        )

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        weight = graph.parameter(self.weight.name, self.weight.value)
        bias = graph.parameter(self.bias.name, self.bias.value)
        return graph.conv2d(x, weight, bias, stride=self.stride, padding=self.padding)

    def parameters(self) -> tuple[Parameter, ...]:
        return self.weight, self.bias

    def buffers(self) -> tuple[Parameter, ...]:
        return ()


class MaxPool2D(_Stateless):
    def __init__(self, name: str, size: int = 2) -> None:
        self.name = name
        self.size = size

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        return graph.max_pool2d(x, size=self.size, stride=self.size)


class ReLU(_Stateless):
    def __init__(self, name: str = "relu") -> None:
        self.name = name

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        return graph.relu(x)


class Flatten(_Stateless):
    def __init__(self, name: str = "flatten") -> None:
        self.name = name

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        return graph.reshape(x, (x.shape[0], -1))


class Unflatten(_Stateless):
    def __init__(self, shape: Sequence[int], name: str = "unflatten") -> None:
        self.name = name
        self.shape = tuple(shape)

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        return graph.reshape(x, (x.shape[0], *self.shape))


class BatchNorm:
    """Per-channel batch normalization over axis 1 of 2-D or 4-D inputs."""

    def __init__(
        self,
        name: str,
        channels: int,
        *,
        momentum: float = BATCH_NORM_MOMENTUM,
        eps: float = BATCH_NORM_EPS,
    ) -> None:
        if eps <= 0:
            raise ContractError(f"{name}: batch-norm epsilon must be positive, got {eps}")
        if not 0.0 < momentum <= 1.0:
            raise ContractError(f"{name}: momentum must be in (0, 1], got {momentum}")
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.scale = Parameter(f"{name}.scale", tensor_create([channels], 1.0))
        self.shift = Parameter(f"{name}.shift", tensor_create([channels], 0.0))
        self.running_mean = Parameter(f"{name}.running_mean", tensor_create([channels], 0.0))
        self.running_var = Parameter(f"{name}.running_var", tensor_create([channels], 1.0))

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        scale = graph.parameter(self.scale.name, self.scale.value)
        shift = graph.parameter(self.shift.name, self.shift.value)
        if mode is Mode.EVAL:
            return graph.batch_norm_inference(
                x,
                scale,
                shift,
                self.running_mean.value,
                self.running_var.value,
                eps=self.eps,
            )
        if x.shape[0] < 2:
            raise ContractError(f"{self.name}: train-mode batch norm needs batch size >= 2")
        output, mean, variance = graph.batch_norm(x, scale, shift, eps=self.eps)
        keep = 1.0 - self.momentum
        self.running_mean.assign(keep * self.running_mean.value + self.momentum * mean)
        self.running_var.assign(keep * self.running_var.value + self.momentum * variance)
        return output

    def parameters(self) -> tuple[Parameter, ...]:
        return self.scale, self.shift

    def buffers(self) -> tuple[Parameter, ...]:
        return self.running_mean, self.running_var


class Dropout(_Stateless):
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)`` so eval mode is identity."""

    def __init__(self, name: str, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.name = name
        self.rate = rate

    def forward(
        self, graph: Graph, x: Node, mode: Mode = Mode.EVAL, rng: np.random.Generator | None = None
    ) -> Node:
        if mode is Mode.EVAL or self.rate == 0.0:
            return x
        if rng is None:
            raise ContractError(f"{self.name}: train-mode dropout needs a seeded generator")
        keep = rng.random(x.shape) >= self.rate
        return graph.mul(x, graph.constant(keep / (1.0 - self.rate)))


def run_layers(
    graph: Graph,
    layers: Iterable[Layer],
    x: Node,
    mode: Mode,
    rng: np.random.Generator | None = None,
) -> Node:
    for layer in layers:
        x = layer.forward(graph, x, mode, rng)
    return x


def collect_parameters(layers: Iterable[Layer]) -> tuple[Parameter, ...]:
    return tuple(parameter for layer in layers for parameter in layer.parameters())


def collect_buffers(layers: Iterable[Layer]) -> tuple[Parameter, ...]:
    return tuple(buffer for layer in layers for buffer in layer.buffers())


@dataclass(frozen=True, slots=True)
class LossValue:
    """A scalar loss node plus its per-sample contributions when the loss has them."""

    node: Node
    per_sample: Tensor | None = None

    @property
    def value(self) -> float:
        return self.node.item()


def _as_node(graph: Graph, value: Node | npt.ArrayLike) -> Node:
    return value if isinstance(value, Node) else graph.constant(value)


def _per_sample_sum(graph: Graph, x: Node) -> Node:
    flat = x if x.value.ndim == 2 else graph.reshape(x, (x.shape[0], -1))
    return graph.sum(flat, axis=1)


def _mean_of(graph: Graph, per_sample: Node) -> LossValue:
    return LossValue(graph.mean(per_sample), per_sample.value)


def cross_entropy_loss(graph: Graph, logits: Node, labels: npt.ArrayLike) -> LossValue:
    return _mean_of(graph, graph.softmax_cross_entropy(logits, labels))


def mse_loss(graph: Graph, prediction: Node, target: Node | npt.ArrayLike) -> LossValue:
    """Mean over the batch of the squared Euclidean distance per sample."""
    target_node = _as_node(graph, target)
    if prediction.shape != target_node.shape:
        raise ShapeError(
            f"mse_loss: prediction {list(prediction.shape)} vs target {list(target_node.shape)}"
        )
    squared = graph.square(graph.sub(prediction, target_node))
    return _mean_of(graph, _per_sample_sum(graph, squared))


def relative_reconstruction_loss(
    graph: Graph, features: Node, reconstruction: Node | npt.ArrayLike
) -> LossValue:
    """Mean of ``||f - f_hat||^2 / ||f||^2`` with the denominator floored at 1e-8.

    A floor instead of an additive stabilizer keeps the loss exactly invariant to a common
    rescaling of ``f`` and ``f_hat`` whenever ``||f||^2`` is above it.
    """
    target = _as_node(graph, reconstruction)
    if features.shape != target.shape:
        raise ShapeError(
            f"relative_reconstruction_loss: f {list(features.shape)} "
            f"vs f_hat {list(target.shape)}"
        )
    error = _per_sample_sum(graph, graph.square(graph.sub(features, target)))
    norm = graph.clamp_min(_per_sample_sum(graph, graph.square(features)), RELATIVE_LOSS_FLOOR)
    return _mean_of(graph, graph.div(error, norm))


def l1_latent_penalty(graph: Graph, latent: Node) -> LossValue:
    return _mean_of(graph, _per_sample_sum(graph, graph.abs(latent)))


def l2_weight_penalty(graph: Graph, parameters: Iterable[Parameter]) -> LossValue:
    """Sum of squared weights over decay-marked blocks; biases and BN scale/shift are skipped."""
    total: Node | None = None
    for parameter in parameters:
        if not parameter.decay:
            continue
        block = graph.sum(graph.square(graph.parameter(parameter.name, parameter.value)))
        total = block if total is None else graph.add(total, block)
    return LossValue(total if total is not None else graph.constant(0.0))
