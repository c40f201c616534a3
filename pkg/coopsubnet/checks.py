"""Built-in verification suites: tape gradients against finite differences, metric oracles."""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from coopsubnet.diffcore import Graph, Node, Tensor, grad_check, grad_check_parameters, rng_stream
from coopsubnet.metrics import (
    DetectionCounts,
    between_class_variances,
    connected_components,
    dice,
    histogram_levels,
    nuclei_detection_counts,
    otsu_threshold,
    prf1,
)
from coopsubnet.models import Mode
from coopsubnet.nn import (
    BatchNorm,
    Conv2D,
    Dense,
    MaxPool2D,
    Parameter,
    cross_entropy_loss,
    l1_latent_penalty,
    l2_weight_penalty,
    mse_loss,
    relative_reconstruction_loss,
)

LOGGER = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-5
BATCH_NORM_TOLERANCE = 1e-4
GRADIENT_POINTS = 10
SELFTEST_MAPS = 100
SCALED_ERROR_FLOOR = 1e-3


def block_scaled_error(analytic: Tensor, numeric: Tensor) -> Tensor:
    """Relative error whose denominator is floored at 0.1% of the block's largest magnitude.

    Same as :func:`coopsubnet.diffcore.relative_error` wherever ``|a| + |n|`` is within three
    orders of magnitude of the block maximum. Smaller coordinates are measured against that
    floor, so a mistake far below the block's finite-difference noise goes unreported.
    """
    magnitude = np.abs(analytic) + np.abs(numeric)
    floor = max(SCALED_ERROR_FLOOR * float(magnitude.max(initial=0.0)), 1e-12)
    return np.abs(analytic - numeric) / np.maximum(magnitude, floor)


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    error: float
    tolerance: float
    passed: bool


def _result(name: str, error: float, tolerance: float) -> CheckResult:
    passed = bool(error <= tolerance)
    log = LOGGER.info if passed else LOGGER.error
    log("%s %s: error %.3g (tolerance %.1g)", "PASS" if passed else "FAIL", name, error, tolerance)
    return CheckResult(name, error, tolerance, passed)


def _project(graph: Graph, output: Node, rng: np.random.Generator) -> Node:
    # A random linear read-out gives every output coordinate a distinct nonzero weight.
    weights = graph.constant(rng.normal(size=output.shape))
    return graph.sum(graph.mul(output, weights))


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    magnitude = 0.1 + rng.uniform(0.0, 1.0, size=shape)
    return np.where(rng.random(shape) < 0.5, -magnitude, magnitude)


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    # Values at least 1/size apart so no finite-difference step crosses a max-pool tie.
    size = int(np.prod(shape))
    return rng.permutation(size).reshape(shape) / size


def _normal(rng: np.random.Generator) -> Tensor:
    return rng.normal(size=(3, 4))


type PointCheck = Callable[[np.random.Generator], float]


def _input_check(
    build: Callable[[Graph, Node, np.random.Generator], Node],
    sample: Callable[[np.random.Generator], Tensor],
) -> PointCheck:
    def check(rng: np.random.Generator) -> float:
        point = sample(rng)
        readout_seed = int(rng.integers(2**31))

        def loss(graph: Graph, x: Node) -> Node:
            return build(graph, x, rng_stream(readout_seed, "readout"))

        return grad_check(loss, point, measure=block_scaled_error)

    return check


def _layer_check(
    make: Callable[[np.random.Generator], tuple[Callable[[Graph, Node], Node], list[Parameter]]],
    sample: Callable[[np.random.Generator], Tensor],
) -> PointCheck:
    def check(rng: np.random.Generator) -> float:
        forward, parameters = make(rng)
        point = sample(rng)
        readout_seed = int(rng.integers(2**31))

        def loss(graph: Graph) -> Node:
            output = forward(graph, graph.parameters["input"])
            return _project(graph, output, rng_stream(readout_seed, "readout"))

        blocks: dict[str, npt.ArrayLike] = {"input": point}
        blocks.update({parameter.name: parameter.value for parameter in parameters})
        errors = grad_check_parameters(
            loss, blocks, max_coordinates=48, measure=block_scaled_error
        )
        return max(errors.values())

    return check


def _ops() -> Mapping[str, tuple[PointCheck, float]]:
    labels = np.array([0, 2, 1])

    def dense(rng: np.random.Generator) -> tuple[Callable[[Graph, Node], Node], list[Parameter]]:
        layer = Dense("dense", 4, 5, int(rng.integers(2**31)))
        return lambda graph, x: layer.forward(graph, x, Mode.TRAIN), list(layer.parameters())

    def conv(rng: np.random.Generator) -> tuple[Callable[[Graph, Node], Node], list[Parameter]]:
        layer = Conv2D("conv", 2, 3, 3, int(rng.integers(2**31)), padding=1)
        return lambda graph, x: layer.forward(graph, x, Mode.TRAIN), list(layer.parameters())

    def pool(rng: np.random.Generator) -> tuple[Callable[[Graph, Node], Node], list[Parameter]]:
        layer = MaxPool2D("pool", 2)
        return lambda graph, x: layer.forward(graph, x, Mode.TRAIN), []

    def batch_norm(
        rng: np.random.Generator,
    ) -> tuple[Callable[[Graph, Node], Node], list[Parameter]]:
        layer = BatchNorm("bn", 3)
        layer.scale.assign(rng.uniform(0.5, 1.5, size=3))
        layer.shift.assign(rng.normal(size=3))
        return lambda graph, x: layer.forward(graph, x, Mode.TRAIN), list(layer.parameters())

    def relative(graph: Graph, x: Node, rng: np.random.Generator) -> Node:
        return relative_reconstruction_loss(graph, x, rng.normal(size=x.shape)).node

    def weight_decay(graph: Graph, x: Node, rng: np.random.Generator) -> Node:
        decayed = Parameter("x", x.value, decay=True)
        return l2_weight_penalty(graph, [decayed]).node

    return {
        "matmul": (
            _input_check(
                lambda g, x, r: _project(g, g.matmul(x, g.constant(r.normal(size=(4, 2)))), r),
                _normal,
            ),
            GRADIENT_TOLERANCE,
        ),
        "add-broadcast": (
            _input_check(
                lambda g, x, r: _project(g, g.add(g.constant(r.normal(size=(5, 4))), x), r),
                lambda rng: rng.normal(size=4),
            ),
            GRADIENT_TOLERANCE,
        ),
        "mul-div": (
            _input_check(
                lambda g, x, r: _project(g, g.div(g.mul(x, x), g.add_scalar(g.square(x), 1.0)), r),
                _normal,
            ),
            GRADIENT_TOLERANCE,
        ),
        "relu-abs": (
            _input_check(
                lambda g, x, r: _project(g, g.add(g.relu(x), g.abs(g.scale(x, 0.5))), r),
                lambda rng: _away_from_zero(rng, (3, 4)),
            ),
            GRADIENT_TOLERANCE,
        ),
        "mean-axis": (
            _input_check(lambda g, x, r: _project(g, g.mean(g.square(x), axis=1), r), _normal),
            GRADIENT_TOLERANCE,
        ),
        "softmax-cross-entropy": (
            _input_check(lambda g, x, r: cross_entropy_loss(g, x, labels).node, _normal),
            GRADIENT_TOLERANCE,
        ),
        "mse": (
            _input_check(lambda g, x, r: mse_loss(g, x, r.normal(size=x.shape)).node, _normal),
            GRADIENT_TOLERANCE,
        ),
        "relative-reconstruction": (_input_check(relative, _normal), GRADIENT_TOLERANCE),
        "l1-latent": (
            _input_check(
                lambda g, x, r: l1_latent_penalty(g, x).node,
                lambda rng: _away_from_zero(rng, (3, 4)),
            ),
            GRADIENT_TOLERANCE,
        ),
        "l2-weights": (_input_check(weight_decay, _normal), GRADIENT_TOLERANCE),
        "dense": (_layer_check(dense, _normal), GRADIENT_TOLERANCE),
        "conv2d": (
            _layer_check(conv, lambda rng: rng.normal(size=(2, 2, 5, 5))),
            GRADIENT_TOLERANCE,
        ),
        "max-pool": (
            _layer_check(pool, lambda rng: _distinct(rng, (2, 2, 4, 4))),
            GRADIENT_TOLERANCE,
        ),
        "batch-norm": (
            _layer_check(batch_norm, lambda rng: rng.normal(size=(6, 3))),
            BATCH_NORM_TOLERANCE,
        ),
        "batch-norm-spatial": (
            _layer_check(batch_norm, lambda rng: rng.normal(size=(2, 3, 3, 3))),
            BATCH_NORM_TOLERANCE,
        ),
    }


def gradient_suite(points: int = GRADIENT_POINTS, seed: int = 0) -> list[CheckResult]:
    """Every op, layer and loss at ``points`` random inputs; reports the worst error per check."""
    results = []
    for name, (check, tolerance) in _ops().items():
        errors = [check(rng_stream(seed, "gradcheck", name, point)) for point in range(points)]
        results.append(_result(f"gradient {name}", max(errors), tolerance))
    return results


def _exhaustive_otsu_gap(values: Tensor) -> float:
    """Relative shortfall of the returned threshold against a direct scan of every split."""
    levels = histogram_levels(values).ravel().astype(np.float64)
    best = 0.0
    for split in range(255):
        below, above = levels[levels <= split], levels[levels > split]
        if below.size and above.size:
            w0, w1 = below.size / levels.size, above.size / levels.size
            best = max(best, w0 * w1 * (below.mean() - above.mean()) ** 2)
    chosen = round(otsu_threshold(values) * 255 - 0.5)
    histogram = np.bincount(levels.astype(np.int64), minlength=256)
    achieved = float(between_class_variances(histogram)[chosen])
    return max(0.0, (best - achieved) / best) if best > 0 else 0.0


def _flood_fill(binary: npt.NDArray[np.uint8]) -> npt.NDArray[np.int64]:
    labels = np.zeros(binary.shape, dtype=np.int64)
    height, width = binary.shape
    current = 0
    for row in range(height):
        for col in range(width):
            if not binary[row, col] or labels[row, col]:
                continue
            current += 1
            labels[row, col] = current
            queue = deque([(row, col)])
            while queue:
                r, c = queue.popleft()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = r + dr, c + dc
                        inside = 0 <= nr < height and 0 <= nc < width
                        if inside and binary[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = current
                            queue.append((nr, nc))
    return labels


def _fixture_error() -> float:
    expected = {
        "dice overlap": (dice([[1, 1, 0], [0, 0, 0]], [[1, 0, 0], [0, 0, 0]]), 2.0 / 3.0),
        "dice empty": (dice(np.zeros((4, 4)), np.zeros((4, 4))), 1.0),
        "precision": (prf1(DetectionCounts(8, 2, 2))[0], 0.8),
        "f1": (prf1(DetectionCounts(8, 2, 2))[2], 0.8),
        "f1 nothing": (prf1(DetectionCounts(0, 0, 0))[2], 0.0),
    }
    truth = np.zeros((8, 8), dtype=np.uint8)
    truth[1:3, 1:3] = 1
    truth[5:7, 5:7] = 1
    counts = nuclei_detection_counts([(1.5, 1.5), (1.0, 2.0), (4.0, 0.0)], truth)
    expected["detection"] = (float(counts == DetectionCounts(tp=1, fp=2, fn=1)), 1.0)
    return max(abs(actual - wanted) for actual, wanted in expected.values())


def selftest_suite(maps: int = SELFTEST_MAPS, seed: int = 0) -> list[CheckResult]:
    """Otsu and component labeling against brute-force oracles, plus fixed metric fixtures."""
    rng = rng_stream(seed, "selftest")
    gaps = []
    mismatches = 0
    for _ in range(maps):
        blobs = rng.beta(0.6, 0.6, size=(12, 12))
        gaps.append(_exhaustive_otsu_gap(blobs))
        binary = (rng.random((12, 12)) < 0.4).astype(np.uint8)
        if not np.array_equal(connected_components(binary).labels, _flood_fill(binary)):
            mismatches += 1
    return [
        _result("selftest otsu", max(gaps), 1e-9),
        _result("selftest components", float(mismatches), 0.0),
        _result("selftest fixtures", _fixture_error(), 1e-12),
    ]
