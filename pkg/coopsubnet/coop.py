"""The composite network: primary feature extractor and head plus the cooperating auto-encoder."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
import numpy.typing as npt

from coopsubnet.config import ConfigurationError
from coopsubnet.diffcore import ContractError, Graph, Node, ShapeError
from coopsubnet.models import LossKind, Mode, Variant, VariantSpec
from coopsubnet.nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    LossValue,
    MaxPool2D,
    Parameter,
    ReLU,
    Unflatten,
    collect_buffers,
    collect_parameters,
    cross_entropy_loss,
    l1_latent_penalty,
    l2_weight_penalty,
    mse_loss,
    relative_reconstruction_loss,
    run_layers,
)

LOGGER = logging.getLogger(__name__)

DEFAULT_ATTACH = "after-final-dense-hidden"


class BlockKind(StrEnum):
    CONV = "conv"
    DENSE = "dense"
    OUTPUT = "output"


@dataclass(frozen=True, slots=True)
class BlockSpec:
    """One primary-network stage. Conv blocks are conv, batch norm, ReLU and optional pooling."""

    name: str
    kind: BlockKind
    width: int
    kernel: int = 0
    padding: int = 0
    pool: int = 0


@dataclass(frozen=True, slots=True)
class ArchitectureConfig:
    name: str
    input_shape: tuple[int, ...]
    blocks: tuple[BlockSpec, ...]
    attach: str = DEFAULT_ATTACH

    @property
    def outputs(self) -> int:
        return self.blocks[-1].width

    def boundaries(self) -> list[str]:
        return [f"after-{block.name}" for block in self.blocks]

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shape after each block."""
        shapes: list[tuple[int, ...]] = []
        shape = self.input_shape
        for block in self.blocks:
            if block.kind is BlockKind.CONV:
                if len(shape) != 3:
                    raise ConfigurationError(f"{block.name}: conv block needs a [C, H, W] input")
                height = shape[1] + 2 * block.padding - block.kernel + 1
                width = shape[2] + 2 * block.padding - block.kernel + 1
                if block.pool:
                    height, width = height // block.pool, width // block.pool
                if height < 1 or width < 1:
                    raise ConfigurationError(f"{block.name}: activation shrinks below 1x1")
                shape = (block.width, height, width)
            else:
                shape = (block.width,)
            shapes.append(shape)
        return shapes


def mnist_architecture(feature_width: int = 1024) -> ArchitectureConfig:
    return ArchitectureConfig(
        name="mnist",
        input_shape=(1, 28, 28),
        blocks=(
            BlockSpec("conv1", BlockKind.CONV, 32, kernel=5, padding=2, pool=2),
            BlockSpec("conv2", BlockKind.CONV, 64, kernel=5, padding=2, pool=2),
            BlockSpec("fc1", BlockKind.DENSE, feature_width),
            BlockSpec("output", BlockKind.OUTPUT, 10),
        ),
    )


def regression_architecture(
    image_size: int = 16, outputs: int = 16, feature_width: int = 128
) -> ArchitectureConfig:
    """Image-to-coordinates network for the synthetic landmark task."""
    return ArchitectureConfig(
        name="regression",
        input_shape=(1, image_size, image_size),
        blocks=(
            BlockSpec("conv1", BlockKind.CONV, 8, kernel=3, padding=1, pool=2),
            BlockSpec("conv2", BlockKind.CONV, 16, kernel=3, padding=1, pool=2),
            BlockSpec("fc1", BlockKind.DENSE, feature_width),
            BlockSpec("output", BlockKind.OUTPUT, outputs),
        ),
    )


def segmentation_architecture(patch: int = 16, feature_width: int = 256) -> ArchitectureConfig:
    """Patch-to-probability-map network; the output is the flattened ``patch x patch`` map."""
    return ArchitectureConfig(
        name="segmentation",
        input_shape=(1, patch, patch),
        blocks=(
            BlockSpec("conv1", BlockKind.CONV, 8, kernel=3, padding=1, pool=2),
            BlockSpec("conv2", BlockKind.CONV, 16, kernel=3, padding=1, pool=2),
            BlockSpec("fc1", BlockKind.DENSE, feature_width),
            BlockSpec("output", BlockKind.OUTPUT, patch * patch),
        ),
    )


@dataclass(frozen=True, slots=True)
class AttachPoint:
    name: str
    index: int
    early: bool


def select_attach_point(arch: ArchitectureConfig, requested: str) -> AttachPoint:
    """Resolve a boundary name to the block index whose output is the feature vector."""
    boundaries = arch.boundaries()
    if requested == DEFAULT_ATTACH:
        hidden = [i for i, block in enumerate(arch.blocks) if block.kind is BlockKind.DENSE]
        if not hidden:
            raise ConfigurationError(f"{arch.name} has no hidden dense layer to attach to")
        return AttachPoint(boundaries[hidden[-1]], hidden[-1], early=False)
    if requested not in boundaries:
        allowed = ", ".join([DEFAULT_ATTACH, *boundaries[:-1]])
        raise ConfigurationError(
            f"unknown attach point {requested!r} for {arch.name}; allowed: {allowed}"
        )
    index = boundaries.index(requested)
    block = arch.blocks[index]
    if block.kind is BlockKind.OUTPUT:
        raise ConfigurationError(f"{requested}: the output layer has no downstream head")
    early = block.kind is BlockKind.CONV
    if early:
        LOGGER.warning(
            "Attach point %s precedes the first dense layer; early attachment regularizes less",
            requested,
            extra={"architecture": arch.name, "attach": requested},
        )
    return AttachPoint(requested, index, early=early)


def _block_layers(
    block: BlockSpec, in_shape: tuple[int, ...], seed: int
) -> list[Layer]:
    if block.kind is BlockKind.CONV:
        layers: list[Layer] = [
            Conv2D(block.name, in_shape[0], block.width, block.kernel, seed, padding=block.padding),
            BatchNorm(f"{block.name}.bn", block.width),
            ReLU(),
        ]
        if block.pool:
            layers.append(MaxPool2D(f"{block.name}.pool", block.pool))
        return layers
    flatten: list[Layer] = [Flatten()] if len(in_shape) > 1 else []
    dense = Dense(block.name, math.prod(in_shape), block.width, seed)
    if block.kind is BlockKind.OUTPUT:
        return [*flatten, dense]
    return [*flatten, dense, ReLU()]


@dataclass(slots=True)
class CompositeNetwork:
    """Primary network split at the attach point, plus the optional auto-encoder branch.

    Mutated in place by training; confine to one thread while training.
    """

    architecture: ArchitectureConfig
    variant: VariantSpec
    attach: AttachPoint
    feature_extractor: tuple[Layer, ...]
    output_head: tuple[Layer, ...]
    encoder: tuple[Layer, ...]
    decoder: tuple[Layer, ...]
    feature_shape: tuple[int, ...]
    feature_width: int
    bottleneck: int | None
    seed: int

    @property
    def has_autoencoder(self) -> bool:
        return bool(self.encoder)

    def primary_parameters(self) -> tuple[Parameter, ...]:
        return collect_parameters((*self.feature_extractor, *self.output_head))

    def coop_parameters(self) -> tuple[Parameter, ...]:
        return collect_parameters((*self.encoder, *self.decoder))

    def buffers(self) -> tuple[Parameter, ...]:
        return collect_buffers((*self.feature_extractor, *self.output_head))

    def state(self) -> dict[str, Parameter]:
        """Every trainable block and buffer by name, in construction order."""
        blocks = (*self.primary_parameters(), *self.coop_parameters(), *self.buffers())
        return {parameter.name: parameter for parameter in blocks}


def build_composite(arch: ArchitectureConfig, variant: VariantSpec, seed: int) -> CompositeNetwork:
    attach = select_attach_point(arch, arch.attach)
    shapes = arch.activation_shapes()
    in_shapes = [arch.input_shape, *shapes[:-1]]
    per_block = [
        _block_layers(block, in_shape, seed)
        for block, in_shape in zip(arch.blocks, in_shapes, strict=True)
    ]
    extractor = [layer for layers in per_block[: attach.index + 1] for layer in layers]
    head = [layer for layers in per_block[attach.index + 1 :] for layer in layers]
    feature_shape = shapes[attach.index]
    width = math.prod(feature_shape)

    bottleneck = variant.bottleneck
    if variant.kind is Variant.COOP_L1 and bottleneck is None:
        bottleneck = max(1, width // 2)
    if variant.kind.needs_bottleneck:
        if bottleneck is None or bottleneck < 1:
            raise ConfigurationError(f"{variant.label} needs a bottleneck L >= 1")
        if bottleneck >= width:
            raise ConfigurationError(
                f"{variant.label} bottleneck L={bottleneck} must be smaller than F={width}"
            )
    else:
        bottleneck = None

    encoder: list[Layer] = []
    decoder: list[Layer] = []
    if variant.kind.has_autoencoder and bottleneck is not None:
        encoder = [Dense("encoder", width, bottleneck, seed), ReLU()]
        decoder = [Dense("decoder", bottleneck, width, seed)]
    elif variant.kind is Variant.HARDCON and bottleneck is not None:
        spatial = len(feature_shape) > 1
        splice: list[Layer] = [
            *([Flatten()] if spatial else []),
            Dense("hardcon.down", width, bottleneck, seed),
            ReLU(),
            Dense("hardcon.up", bottleneck, width, seed),
            *([Unflatten(feature_shape)] if spatial else []),
        ]
        head = [*splice, *head]
    elif variant.kind is Variant.DROPOUT:
        head = [Dropout("dropout", variant.dropout_rate), *head]

    LOGGER.debug(
        "Built %s network for %s: F=%d L=%s attach=%s",
        arch.name,
        variant.label,
        width,
        bottleneck,
        attach.name,
    )
    return CompositeNetwork(
        architecture=arch,
        variant=variant,
        attach=attach,
        feature_extractor=tuple(extractor),
        output_head=tuple(head),
        encoder=tuple(encoder),
        decoder=tuple(decoder),
        feature_shape=feature_shape,
        feature_width=width,
        bottleneck=bottleneck,
        seed=seed,
    )


@dataclass(frozen=True, slots=True)
class ForwardResult:
    graph: Graph
    primary_output: Node
    f: Node
    z: Node | None = None
    f_hat: Node | None = None


def forward_composite(
    net: CompositeNetwork,
    x: Node | npt.ArrayLike,
    mode: Mode,
    *,
    graph: Graph | None = None,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    graph = graph if graph is not None else Graph()
    inputs = x if isinstance(x, Node) else graph.constant(x)
    expected = net.architecture.input_shape
    if inputs.shape[1:] != expected:
        raise ShapeError(
            f"{net.architecture.name} expects inputs [batch, {', '.join(map(str, expected))}], "
            f"got {list(inputs.shape)}"
        )
    features = run_layers(graph, net.feature_extractor, inputs, mode, rng)
    f = features if features.value.ndim == 2 else graph.reshape(features, (features.shape[0], -1))
    primary = run_layers(graph, net.output_head, features, mode, rng)
    if not net.has_autoencoder:
        return ForwardResult(graph, primary, f)
    z = run_layers(graph, net.encoder, f, mode, rng)
    f_hat = run_layers(graph, net.decoder, z, mode, rng)
    return ForwardResult(graph, primary, f, z, f_hat)


@dataclass(frozen=True, slots=True)
class CompositeLoss:
    """Total loss node with every weighted term it sums, keyed by term name."""

    total: Node
    terms: Mapping[str, Node]
    primary: LossValue
    coop: LossValue | None = None

    @property
    def value(self) -> float:
        return self.total.item()

    def breakdown(self) -> dict[str, float]:
        return {name: node.item() for name, node in self.terms.items()}


def composite_loss(
    result: ForwardResult,
    target: npt.ArrayLike,
    variant: VariantSpec,
    kind: LossKind,
    *,
    alpha: float | None = None,
    weights: Iterable[Parameter] = (),
) -> CompositeLoss:
    """Primary loss plus the variant's regularization terms.

    ``alpha = 0`` disables the cooperating branch: its weighted reconstruction term stays on the
    tape with zero weight and the latent L1 penalty is left out.
    """
    weight = variant.alpha if alpha is None else alpha
    if weight < 0 or not math.isfinite(weight):
        raise ContractError(f"alpha must be finite and >= 0, got {weight}")
    graph = result.graph
    if kind is LossKind.CE:
        primary = cross_entropy_loss(graph, result.primary_output, np.asarray(target))
    else:
        primary = mse_loss(graph, result.primary_output, target)
    terms: dict[str, Node] = {"primary": primary.node}
    total = primary.node
    coop: LossValue | None = None

    if variant.kind.has_autoencoder:
        if result.f_hat is None or result.z is None:
            raise ContractError(f"{variant.label} needs the reconstructed features f_hat")
        coop = relative_reconstruction_loss(graph, result.f, result.f_hat)
        terms["coop"] = graph.scale(coop.node, weight)
        total = graph.add(total, terms["coop"])
        if variant.kind is Variant.COOP_L1 and weight > 0:
            sparsity = l1_latent_penalty(graph, result.z)
            terms["l1"] = graph.scale(sparsity.node, variant.l1_weight)
            total = graph.add(total, terms["l1"])
    if variant.kind is Variant.L2REG:
        decay = l2_weight_penalty(graph, weights)
        terms["decay"] = graph.scale(decay.node, variant.weight_decay)
        total = graph.add(total, terms["decay"])
    return CompositeLoss(total=total, terms=terms, primary=primary, coop=coop)
