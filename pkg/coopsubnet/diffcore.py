"""Dense float64 tensors, a define-by-run reverse-mode tape and finite-difference checks.

A :class:`Graph` is rebuilt for every forward pass. Each operation appends a :class:`Node`
holding its output and a vector-Jacobian product; :func:`backward` walks the tape in reverse
insertion order, so gradient accumulation order is fixed and results are reproducible.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

LOGGER = logging.getLogger(__name__)

type Tensor = npt.NDArray[np.float64]
type GradientMap = dict[str, Tensor]
type VectorJacobian = Callable[[Tensor], tuple[Tensor | None, ...]]
type ErrorMeasure = Callable[[Tensor, Tensor], Tensor]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ContractError(ValueError):
    """Raised when an operation's precondition or output contract is violated."""


def freeze(value: npt.ArrayLike) -> Tensor:
    array = np.asarray(value, dtype=np.float64)
    view = array.view()
    view.setflags(write=False)
    return view


def tensor_create(shape: Sequence[int], fill: float | npt.ArrayLike = 0.0) -> Tensor:
    """Create a read-only float64 tensor filled with a scalar or a row-major value array."""
    dims = tuple(int(dim) for dim in shape)
    if not dims or any(dim < 1 for dim in dims):
        raise ShapeError(f"shape must be non-empty with dimensions >= 1, got {list(shape)}")
    if np.ndim(fill) == 0:
        return freeze(np.full(dims, float(np.asarray(fill)), dtype=np.float64))
    values = np.array(fill, dtype=np.float64).ravel()
    if values.size != math.prod(dims):
        raise ShapeError(
            f"{values.size} values cannot fill shape {list(dims)} ({math.prod(dims)} elements)"
        )
    return freeze(values.reshape(dims))


def rng_stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a counter-based generator keyed by the seed and any number of stream labels."""
    words = [int(seed) % 2**63]
    for key in keys:
        words.append(zlib.crc32(key.encode("utf-8")) if isinstance(key, str) else int(key) % 2**63)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def _unbroadcast(gradient: Tensor, shape: tuple[int, ...]) -> Tensor:
    if gradient.shape == shape:
        return gradient
    extra = gradient.ndim - len(shape)
    reduced = gradient.sum(axis=tuple(range(extra))) if extra > 0 else gradient
    axes = tuple(axis for axis, dim in enumerate(shape) if dim == 1 and reduced.shape[axis] != 1)
    if axes:
        reduced = reduced.sum(axis=axes, keepdims=True)
    return reduced.reshape(shape)


def _broadcast_shape(kind: str, left: tuple[int, ...], right: tuple[int, ...]) -> None:
    try:
        np.broadcast_shapes(left, right)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {list(left)} and {list(right)} do not broadcast") from exc


@dataclass(frozen=True, slots=True, eq=False)
class Node:
    """One tape entry: the op output plus how to pull a gradient back through it."""

    index: int
    kind: str
    inputs: tuple[int, ...]
    value: Tensor
    vjp: VectorJacobian | None = None
    parameter: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"node {self.index} ({self.kind}) is not scalar: {self.shape}")
        return float(self.value.reshape(()))


class Graph:
    """Insertion-ordered tape. Confine a graph to one thread for its lifetime."""

    def __init__(self, *, check_finite: bool = True) -> None:
        self.nodes: list[Node] = []
        self._parameters: dict[str, Node] = {}
        self._check_finite = check_finite

    @property
    def parameters(self) -> Mapping[str, Node]:
        return self._parameters

    def _record(
        self,
        kind: str,
        inputs: Sequence[Node],
        value: npt.ArrayLike,
        vjp: VectorJacobian | None,
        *,
        parameter: str | None = None,
    ) -> Node:
        for node in inputs:
            if node.index >= len(self.nodes) or self.nodes[node.index] is not node:
                raise ContractError(f"{kind}: input node {node.index} belongs to another graph")
        output = freeze(value)
        if self._check_finite and not np.all(np.isfinite(output)):
            raise ContractError(f"{kind} produced non-finite values")
        node = Node(
            index=len(self.nodes),
            kind=kind,
            inputs=tuple(node.index for node in inputs),
            value=output,
            vjp=vjp,
            parameter=parameter,
        )
        self.nodes.append(node)
        return node

    def constant(self, value: npt.ArrayLike) -> Node:
        return self._record("constant", (), value, None)

    def parameter(self, name: str, value: npt.ArrayLike) -> Node:
        """Register a named leaf; a name already on the tape returns the existing node."""
        existing = self._parameters.get(name)
        if existing is not None:
            return existing
        node = self._record("parameter", (), value, None, parameter=name)
        self._parameters[name] = node
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
        left, right = a.value, b.value

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor]:
            return grad @ right.T, left.T @ grad

        return self._record("matmul", (a, b), left @ right, vjp)

    def add(self, a: Node, b: Node) -> Node:
        _broadcast_shape("add", a.shape, b.shape)

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor]:
            return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

        return self._record("add", (a, b), a.value + b.value, vjp)

    def sub(self, a: Node, b: Node) -> Node:
        _broadcast_shape("sub", a.shape, b.shape)

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor]:
            return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

        return self._record("sub", (a, b), a.value - b.value, vjp)

    def mul(self, a: Node, b: Node) -> Node:
        _broadcast_shape("mul", a.shape, b.shape)
        left, right = a.value, b.value

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor]:
            return _unbroadcast(grad * right, a.shape), _unbroadcast(grad * left, b.shape)

        return self._record("mul", (a, b), left * right, vjp)

    def div(self, a: Node, b: Node) -> Node:
        _broadcast_shape("div", a.shape, b.shape)
        numerator, denominator = a.value, b.value

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor]:
            return (
                _unbroadcast(grad / denominator, a.shape),
                _unbroadcast(-grad * numerator / (denominator * denominator), b.shape),
            )

        return self._record("div", (a, b), numerator / denominator, vjp)

    def scale(self, a: Node, factor: float) -> Node:
        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (grad * factor,)

        return self._record("scale", (a,), a.value * factor, vjp)

    def add_scalar(self, a: Node, offset: float) -> Node:
        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (grad,)

        return self._record("add_scalar", (a,), a.value + offset, vjp)

    def clamp_min(self, a: Node, floor: float) -> Node:
        source = a.value

        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (grad * (source >= floor),)

        return self._record("clamp_min", (a,), np.maximum(source, floor), vjp)

    def square(self, a: Node) -> Node:
        source = a.value

        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (2.0 * source * grad,)

        return self._record("square", (a,), source * source, vjp)

    def abs(self, a: Node) -> Node:
        source = a.value

        def vjp(grad: Tensor) -> tuple[Tensor]:
            # sign(0) == 0 is the subgradient chosen at exact zeros.
            return (np.sign(source) * grad,)

        return self._record("abs", (a,), np.abs(source), vjp)

    def relu(self, a: Node) -> Node:
        source = a.value

        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (grad * (source > 0.0),)

        return self._record("relu", (a,), np.maximum(source, 0.0), vjp)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        shape = a.shape

        def vjp(grad: Tensor) -> tuple[Tensor]:
            expanded = grad if axis is None else np.expand_dims(grad, axis)
            return (np.broadcast_to(expanded, shape).copy(),)

        return self._record("sum", (a,), np.sum(a.value, axis=axis), vjp)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        count = a.value.size if axis is None else a.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / count)

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        source_shape = a.shape
        try:
            reshaped = a.value.reshape(tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"reshape: {list(source_shape)} -> {list(shape)}") from exc

        def vjp(grad: Tensor) -> tuple[Tensor]:
            return (grad.reshape(source_shape),)

        return self._record("reshape", (a,), reshaped, vjp)

    def softmax_cross_entropy(self, logits: Node, labels: npt.ArrayLike) -> Node:
        """Per-sample ``-log softmax(logits)[label]`` computed through log-sum-exp."""
        if logits.value.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {list(logits.shape)}")
        batch, classes = logits.shape
        targets = np.asarray(labels)
        if targets.shape != (batch,):
            raise ShapeError(f"softmax_cross_entropy: {targets.shape} labels for batch {batch}")
        if not np.issubdtype(targets.dtype, np.integer) or np.any(
            (targets < 0) | (targets >= classes)
        ):
            raise ContractError(f"labels must be class indices in [0, {classes})")
        shifted = logits.value - logits.value.max(axis=1, keepdims=True)
        log_normalizer = np.log(np.exp(shifted).sum(axis=1))
        rows = np.arange(batch)
        per_sample = log_normalizer - shifted[rows, targets]
        probabilities = np.exp(shifted - log_normalizer[:, None])

        def vjp(grad: Tensor) -> tuple[Tensor]:
            local = probabilities.copy()
            local[rows, targets] -= 1.0
            return (local * grad[:, None],)

        return self._record("softmax_cross_entropy", (logits,), per_sample, vjp)

    def conv2d(
        self, x: Node, weight: Node, bias: Node, *, stride: int = 1, padding: int = 0
    ) -> Node:
        """Cross-correlation of ``[N, C, H, W]`` with ``[O, C, kh, kw]`` via im2col."""
        if x.value.ndim != 4 or weight.value.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-D input and kernel, got {list(x.shape)}")
        n, channels, height, width = x.shape
        out_channels, in_channels, kh, kw = weight.shape
        if in_channels != channels:
            raise ShapeError(f"conv2d: input has {channels} channels, kernel expects {in_channels}")
        if bias.shape != (out_channels,):
            raise ShapeError(f"conv2d: bias shape {list(bias.shape)} for {out_channels} outputs")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
        if height + 2 * padding < kh or width + 2 * padding < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {height}x{width}")
        out_h = (height + 2 * padding - kh) // stride + 1
        out_w = (width + 2 * padding - kw) // stride + 1
        pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        padded = np.pad(x.value, pads)
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        columns = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)
        kernel = weight.value.reshape(out_channels, -1)
        output = (columns @ kernel.T + bias.value).reshape(n, out_h, out_w, out_channels)

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor, Tensor]:
            rows = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
            d_weight = (rows.T @ columns).reshape(weight.shape)
            d_bias = rows.sum(axis=0)
            d_columns = (rows @ kernel).reshape(n, out_h, out_w, channels, kh, kw)
            d_padded = np.zeros(padded.shape)
            span_h, span_w = stride * out_h, stride * out_w
            for i in range(kh):
                for j in range(kw):
                    d_padded[:, :, i : i + span_h : stride, j : j + span_w : stride] += d_columns[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            d_x = d_padded[:, :, padding : padding + height, padding : padding + width]
            return d_x, d_weight, d_bias

        return self._record("conv2d", (x, weight, bias), output.transpose(0, 3, 1, 2), vjp)

    def max_pool2d(self, x: Node, *, size: int = 2, stride: int = 2) -> Node:
        if x.value.ndim != 4:
            raise ShapeError(f"max_pool2d: expected 4-D input, got {list(x.shape)}")
        n, channels, height, width = x.shape
        if size < 1 or stride < 1 or size > height or size > width:
            raise ShapeError(f"max_pool2d: window {size} does not fit {height}x{width}")
        windows = sliding_window_view(x.value, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
        out_h, out_w = windows.shape[2], windows.shape[3]
        flat = windows.reshape(n, channels, out_h, out_w, size * size)
        winner = flat.argmax(axis=-1)
        output = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
        offset_h, offset_w = np.divmod(winner, size)
        rows = np.arange(out_h)[None, None, :, None] * stride + offset_h
        cols = np.arange(out_w)[None, None, None, :] * stride + offset_w
        batch_index = np.arange(n)[:, None, None, None]
        channel_index = np.arange(channels)[None, :, None, None]

        def vjp(grad: Tensor) -> tuple[Tensor]:
            d_x = np.zeros(x.shape)
            np.add.at(d_x, (batch_index, channel_index, rows, cols), grad)
            return (d_x,)

        return self._record("max_pool2d", (x,), output, vjp)

    def batch_norm(
        self, x: Node, gamma: Node, beta: Node, *, eps: float
    ) -> tuple[Node, Tensor, Tensor]:
        """Normalize per channel (axis 1) with batch statistics; returns node, mean, variance."""
        axes, broadcast = _channel_axes(x.shape, gamma.shape, beta.shape)
        count = x.value.size // x.shape[1]
        mean = x.value.mean(axis=axes)
        variance = x.value.var(axis=axes)
        inv_std = 1.0 / np.sqrt(variance + eps)
        normalized = (x.value - mean.reshape(broadcast)) * inv_std.reshape(broadcast)
        scale = gamma.value.reshape(broadcast)

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor, Tensor]:
            d_beta = grad.sum(axis=axes)
            d_gamma = (grad * normalized).sum(axis=axes)
            d_x = (scale * inv_std.reshape(broadcast) / count) * (
                count * grad - d_beta.reshape(broadcast) - normalized * d_gamma.reshape(broadcast)
            )
            return d_x, d_gamma, d_beta

        output = normalized * scale + beta.value.reshape(broadcast)
        node = self._record("batch_norm", (x, gamma, beta), output, vjp)
        return node, mean, variance

    def batch_norm_inference(
        self, x: Node, gamma: Node, beta: Node, mean: Tensor, variance: Tensor, *, eps: float
    ) -> Node:
        axes, broadcast = _channel_axes(x.shape, gamma.shape, beta.shape)
        inv_std = (1.0 / np.sqrt(variance + eps)).reshape(broadcast)
        normalized = (x.value - mean.reshape(broadcast)) * inv_std
        scale = gamma.value.reshape(broadcast)

        def vjp(grad: Tensor) -> tuple[Tensor, Tensor, Tensor]:
            return grad * scale * inv_std, (grad * normalized).sum(axis=axes), grad.sum(axis=axes)

        output = normalized * scale + beta.value.reshape(broadcast)
        return self._record("batch_norm_inference", (x, gamma, beta), output, vjp)


def _channel_axes(
    shape: tuple[int, ...], gamma: tuple[int, ...], beta: tuple[int, ...]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if len(shape) not in {2, 4}:
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {list(shape)}")
    if gamma != (shape[1],) or beta != (shape[1],):
        raise ShapeError(f"batch_norm: scale/shift must have shape [{shape[1]}]")
    axes = (0,) if len(shape) == 2 else (0, 2, 3)
    broadcast = (1, shape[1]) if len(shape) == 2 else (1, shape[1], 1, 1)
    return axes, broadcast


def backward(graph: Graph, loss: Node) -> GradientMap:
    """Gradients of a scalar node with respect to every parameter registered on the tape."""
    if loss.index >= len(graph.nodes) or graph.nodes[loss.index] is not loss:
        raise ContractError("loss node does not belong to this graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar-valued, got shape {list(loss.shape)}")
    LOGGER.debug("Backward pass over %d nodes", loss.index + 1, extra={"loss": describe(loss)})
    gradients: list[Tensor | None] = [None] * (loss.index + 1)
    gradients[loss.index] = np.ones_like(loss.value)
    for node in reversed(graph.nodes[: loss.index + 1]):
        upstream = gradients[node.index]
        if upstream is None or node.vjp is None:
            continue
        for input_index, contribution in zip(node.inputs, node.vjp(upstream), strict=True):
            if contribution is None:
                continue
            current = gradients[input_index]
            gradients[input_index] = contribution if current is None else current + contribution
    result: GradientMap = {}
    for name, node in graph.parameters.items():
        gradient = gradients[node.index] if node.index <= loss.index else None
        result[name] = (
            np.zeros_like(node.value) if gradient is None else np.asarray(gradient, np.float64)
        )
    return result


def _central_difference(
    evaluate: Callable[[Tensor], float], point: Tensor, eps: float, coordinates: Sequence[int]
) -> Tensor:
    numeric = np.zeros(point.size)
    for coordinate in coordinates:
        shifted = point.copy().ravel()
        shifted[coordinate] += eps
        upper = evaluate(shifted.reshape(point.shape))
        shifted[coordinate] -= 2.0 * eps
        lower = evaluate(shifted.reshape(point.shape))
        numeric[coordinate] = (upper - lower) / (2.0 * eps)
    return numeric


def relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> Tensor:
    """Elementwise ``|a - n| / max(|a| + |n|, 1e-12)``."""
    left = np.asarray(analytic, dtype=np.float64)
    right = np.asarray(numeric, dtype=np.float64)
    return np.abs(left - right) / np.maximum(np.abs(left) + np.abs(right), 1e-12)


def _max_error(
    analytic: Tensor, numeric: Tensor, coordinates: Sequence[int], measure: ErrorMeasure
) -> float:
    picked = np.asarray(coordinates, dtype=np.intp)
    if not picked.size:
        return 0.0
    return float(np.max(measure(analytic.ravel()[picked], numeric[picked])))


def grad_check(
    f: Callable[[Graph, Node], Node],
    x: npt.ArrayLike,
    eps: float = 1e-5,
    *,
    measure: ErrorMeasure = relative_error,
) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``f`` builds a scalar loss on the given graph from the input node. Results near kinks
    (ReLU at zero, max-pool ties, ``abs`` at zero) are unreliable; check at points away from them.
    ``measure`` compares the two gradients elementwise and defaults to :func:`relative_error`.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    point = np.array(x, dtype=np.float64)

    def evaluate(value: Tensor) -> float:
        graph = Graph(check_finite=False)
        return f(graph, graph.parameter("x", value)).item()

    graph = Graph(check_finite=False)
    analytic = backward(graph, f(graph, graph.parameter("x", point)))["x"]
    coordinates = range(point.size)
    numeric = _central_difference(evaluate, point, eps, coordinates)
    return _max_error(analytic, numeric, coordinates, measure)


def grad_check_parameters(
    f: Callable[[Graph], Node],
    blocks: Mapping[str, npt.ArrayLike],
    *,
    eps: float = 1e-5,
    max_coordinates: int | None = None,
    seed: int = 0,
    measure: ErrorMeasure = relative_error,
) -> dict[str, float]:
    """Per-block max relative error for a loss built from pre-registered named parameters.

    Every block is registered on a fresh graph before ``f`` runs, so layers asking the graph
    for a parameter of the same name receive the (possibly perturbed) block.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = {name: np.array(value, dtype=np.float64) for name, value in blocks.items()}

    def build(values: Mapping[str, Tensor]) -> tuple[Graph, Node]:
        graph = Graph(check_finite=False)
        for name, value in values.items():
            graph.parameter(name, value)
        return graph, f(graph)

    graph, loss = build(base)
    analytic = backward(graph, loss)
    errors: dict[str, float] = {}
    for name, value in base.items():
        coordinates: Sequence[int] = range(value.size)
        if max_coordinates is not None and value.size > max_coordinates:
            picked = rng_stream(seed, "grad-check", name).choice(
                value.size, max_coordinates, replace=False
            )
            coordinates = [int(index) for index in np.sort(picked)]

        def evaluate(candidate: Tensor, block: str = name) -> float:
            return build({**base, block: candidate})[1].item()

        numeric = _central_difference(evaluate, value, eps, coordinates)
        errors[name] = _max_error(analytic[name], numeric, coordinates, measure)
    return errors


def describe(node: Node) -> dict[str, Any]:
    """Loggable summary of a node."""
    return {"index": node.index, "kind": node.kind, "shape": list(node.shape)}
