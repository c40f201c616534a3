"""Evaluation statistics for classification, landmark regression and nucleus segmentation."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from coopsubnet.data import BinaryMap, as_binary_map
from coopsubnet.diffcore import ContractError, ShapeError

HISTOGRAM_LEVELS = 256


@dataclass(frozen=True, slots=True)
class DetectionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ContractError(f"detection counts must be non-negative: {self}")

    def __add__(self, other: DetectionCounts) -> DetectionCounts:
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True, slots=True)
class ComponentLabeling:
    """Label map (0 = background, 1..K by first pixel in raster order) plus centroids."""

    labels: npt.NDArray[np.int64]
    centroids: tuple[tuple[float, float], ...]

    @property
    def count(self) -> int:
        return len(self.centroids)


def accuracy(predicted: npt.ArrayLike, true: npt.ArrayLike) -> float:
    left, right = np.asarray(predicted), np.asarray(true)
    if left.shape != right.shape:
        raise ShapeError(f"accuracy: {list(left.shape)} predictions vs {list(right.shape)} labels")
    if left.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(left == right))


def landmark_error(predicted: npt.ArrayLike, truth: npt.ArrayLike) -> float:
    """Mean over samples of the summed squared coordinate differences."""
    left = np.asarray(predicted, dtype=np.float64)
    right = np.asarray(truth, dtype=np.float64)
    if left.shape != right.shape or left.ndim == 0 or len(left) == 0:
        raise ShapeError(f"landmark_error: {list(left.shape)} vs {list(right.shape)}")
    squared = ((left - right) ** 2).reshape(len(left), -1)
    return float(squared.sum(axis=1).mean())


def histogram_levels(values: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """Quantize to 256 levels so that ``level <= k`` iff ``v <= (k + 0.5) / 255``."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0 or not np.all(np.isfinite(array)):
        raise ContractError("Otsu needs a non-empty array of finite values")
    if array.min() < 0.0 or array.max() > 1.0:
        raise ContractError("Otsu inputs must lie in [0, 1]")
    scaled = np.ceil(array * (HISTOGRAM_LEVELS - 1) - 0.5)
    return np.clip(scaled, 0, HISTOGRAM_LEVELS - 1).astype(np.int64)


def between_class_variances(histogram: npt.NDArray[np.int64]) -> npt.NDArray[np.float64]:
    """``w0 * w1 * (mu0 - mu1)^2`` for every split ``level <= k`` vs ``level > k``."""
    counts = histogram.astype(np.float64)
    total = counts.sum()
    levels = np.arange(len(counts), dtype=np.float64)
    below = np.cumsum(counts)
    below_mass = np.cumsum(counts * levels)
    above = total - below
    above_mass = below_mass[-1] - below_mass
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = below_mass / below - above_mass / above
        variance = (below / total) * (above / total) * gap * gap
    return np.where((below > 0) & (above > 0), variance, 0.0)


def otsu_threshold(values: npt.ArrayLike) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram.

    Binarize with ``value > threshold``. Ties go to the lowest threshold. When every value
    falls into one bin, the search is repeated on the values stretched to ``[0, 1]``.
    """
    histogram = np.bincount(histogram_levels(values).ravel(), minlength=HISTOGRAM_LEVELS)
    if np.count_nonzero(histogram) < 2:
        array = np.asarray(values, dtype=np.float64)
        low, high = float(array.min()), float(array.max())
        if low == high:
            raise ContractError("Otsu threshold needs at least two distinct levels")
        return low + otsu_threshold((array - low) / (high - low)) * (high - low)
    best = int(np.argmax(between_class_variances(histogram)))
    return (best + 0.5) / (HISTOGRAM_LEVELS - 1)


def binarize(values: npt.ArrayLike, threshold: float) -> BinaryMap:
    return (np.asarray(values) > threshold).astype(np.uint8)


class _UnionFind:
    def __init__(self) -> None:
        self.parent = [0]

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, item: int) -> int:
        root = item
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[item] != root:
            self.parent[item], item = root, self.parent[item]
        return root

    def union(self, left: int, right: int) -> None:
        a, b = self.find(left), self.find(right)
        if a != b:
            self.parent[max(a, b)] = min(a, b)


def connected_components(binary: npt.ArrayLike) -> ComponentLabeling:
    """Two-pass 8-connected labeling; centroids are unweighted ``(row, col)`` means."""
    grid = as_binary_map(binary)
    height, width = grid.shape
    provisional = np.zeros((height, width), dtype=np.int64)
    sets = _UnionFind()
    for row, col in zip(*np.nonzero(grid), strict=True):
        neighbours = [
            int(provisional[r, c])
            for r, c in ((row - 1, col - 1), (row - 1, col), (row - 1, col + 1), (row, col - 1))
            if 0 <= r and 0 <= c < width and provisional[r, c]
        ]
        if not neighbours:
            provisional[row, col] = sets.make()
            continue
        smallest = min(neighbours)
        provisional[row, col] = smallest
        for other in neighbours:
            sets.union(smallest, other)

    roots = np.array([sets.find(item) for item in range(len(sets.parent))], dtype=np.int64)
    resolved = roots[provisional]
    flat = resolved.ravel()
    occupied = np.flatnonzero(flat)
    _, first = np.unique(flat[occupied], return_index=True)
    ordered = flat[occupied][np.sort(first)]
    renumber = np.zeros(len(sets.parent), dtype=np.int64)
    renumber[ordered] = np.arange(1, len(ordered) + 1)
    labels = renumber[resolved]

    count = len(ordered)
    rows, cols = np.indices(grid.shape)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    row_sums = np.bincount(labels.ravel(), weights=rows.ravel(), minlength=count + 1)[1:]
    col_sums = np.bincount(labels.ravel(), weights=cols.ravel(), minlength=count + 1)[1:]
    centroids = tuple(
        (float(r / n), float(c / n)) for r, c, n in zip(row_sums, col_sums, sizes, strict=True)
    )
    return ComponentLabeling(labels=labels, centroids=centroids)


def nuclei_detection_counts(
    centroids: Iterable[tuple[float, float]], ground_truth: npt.ArrayLike
) -> DetectionCounts:
    """Greedy matching in centroid order: each ground-truth nucleus can be claimed once.

    A centroid landing on an unclaimed nucleus component is a true positive; background or a
    repeat claim is a false positive; nuclei never claimed are false negatives.
    """
    components = connected_components(ground_truth)
    height, width = components.labels.shape
    claimed: set[int] = set()
    false_positives = 0
    for row, col in centroids:
        r, c = math.floor(row + 0.5), math.floor(col + 0.5)
        if not (0 <= r < height and 0 <= c < width):
            raise ContractError(f"centroid ({row}, {col}) lies outside the {height}x{width} map")
        label = int(components.labels[r, c])
        if label == 0 or label in claimed:
            false_positives += 1
        else:
            claimed.add(label)
    return DetectionCounts(
        tp=len(claimed), fp=false_positives, fn=components.count - len(claimed)
    )


def dice(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty maps score 1.0."""
    left, right = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if left.shape != right.shape:
        raise ShapeError(f"dice: {list(left.shape)} vs {list(right.shape)}")
    total = int(left.sum()) + int(right.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(left, right).sum()) / total


def prf1(counts: DetectionCounts) -> tuple[float, float, float]:
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True, slots=True)
class SegmentationScores:
    dice: float
    counts: DetectionCounts
    precision: float
    recall: float
    f1: float
    l2_error: float


def binarize_prediction(prediction: npt.ArrayLike) -> BinaryMap:
    """Otsu-binarize a probability map; a constant map predicts nothing."""
    values = np.clip(np.asarray(prediction, dtype=np.float64), 0.0, 1.0)
    try:
        return binarize(values, otsu_threshold(values))
    except ContractError:
        return np.zeros(values.shape, dtype=np.uint8)


def segmentation_scores(
    predictions: Sequence[npt.ArrayLike], ground_truth: Sequence[npt.ArrayLike]
) -> SegmentationScores:
    """Per-map Dice and L2 error averaged, detection counts summed over all maps."""
    if len(predictions) != len(ground_truth) or not predictions:
        raise ShapeError(
            f"segmentation_scores: {len(predictions)} predictions vs {len(ground_truth)} maps"
        )
    overlaps: list[float] = []
    errors: list[float] = []
    counts = DetectionCounts(0, 0, 0)
    for prediction, truth in zip(predictions, ground_truth, strict=True):
        probability = np.asarray(prediction, dtype=np.float64)
        expected = as_binary_map(truth)
        if probability.shape != expected.shape:
            raise ShapeError(f"prediction {probability.shape} vs ground truth {expected.shape}")
        predicted = binarize_prediction(probability)
        overlaps.append(dice(predicted, expected))
        errors.append(float(np.mean((probability - expected) ** 2)))
        counts = counts + nuclei_detection_counts(
            connected_components(predicted).centroids, expected
        )
    precision, recall, f1 = prf1(counts)
    return SegmentationScores(
        dice=float(np.mean(overlaps)),
        counts=counts,
        precision=precision,
        recall=recall,
        f1=f1,
        l2_error=float(np.mean(errors)),
    )
