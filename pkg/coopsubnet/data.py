"""Dataset ingestion, budget reduction, patches, dilation and the synthetic task generators."""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from coopsubnet.checkpoint import read_blocks, write_blocks
from coopsubnet.config import ConfigurationError
from coopsubnet.diffcore import ContractError, ShapeError, Tensor, rng_stream, tensor_create

LOGGER = logging.getLogger(__name__)

type Targets = npt.NDArray[Any]
type BinaryMap = npt.NDArray[np.uint8]

MAX_IDX_ELEMENTS = 2**31 - 1
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
LANDMARK_SIGMA = 0.8


class FormatError(ValueError):
    """Raised for malformed binary input; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, *, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class IdxKind(IntEnum):
    LABELS = 0x00000801
    IMAGES = 0x00000803


@dataclass(frozen=True, slots=True)
class Provenance:
    source: str
    fraction: float = 1.0
    seed: int | None = None
    intrinsic_dim: int | None = None


@dataclass(frozen=True, slots=True)
class Dataset:
    """Inputs ``[N, ...]`` paired with class indices ``[N]`` or real targets ``[N, O]``."""

    inputs: Tensor
    targets: Targets
    provenance: Provenance

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.targets):
            raise ShapeError(
                f"{len(self.inputs)} inputs but {len(self.targets)} targets "
                f"in {self.provenance.source}"
            )
        if not 0.0 < self.provenance.fraction <= 1.0:
            raise ConfigurationError(
                f"reduction fraction must be in (0, 1], got {self.provenance.fraction}"
            )

    @property
    def size(self) -> int:
        return len(self.inputs)

    @property
    def has_labels(self) -> bool:
        return bool(np.issubdtype(self.targets.dtype, np.integer))

    def take(self, indices: npt.ArrayLike) -> tuple[Tensor, Targets]:
        picked = np.asarray(indices, dtype=np.intp)
        return self.inputs[picked], self.targets[picked]

    def subset(self, indices: npt.ArrayLike, provenance: Provenance | None = None) -> Dataset:
        inputs, targets = self.take(indices)
        return Dataset(inputs, targets, provenance or self.provenance)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}", offset=0) from exc
    return raw


def parse_idx(payload: bytes, source: str = "<bytes>", expected: IdxKind | None = None) -> Targets:
    if len(payload) < 8:
        raise FormatError(f"{source}: header needs 8 bytes, file has {len(payload)}", offset=0)
    (magic,) = struct.unpack(">I", payload[:4])
    try:
        kind = IdxKind(magic)
    except ValueError as exc:
        raise FormatError(f"{source}: unknown IDX magic 0x{magic:08x}", offset=0) from exc
    if expected is not None and kind is not expected:
        raise FormatError(
            f"{source}: magic 0x{magic:08x} is a {kind.name.lower()} file, "
            f"expected {expected.name.lower()} (0x{expected.value:08x})",
            offset=0,
        )
    rank = 3 if kind is IdxKind.IMAGES else 1
    header = 4 + 4 * rank
    if len(payload) < header:
        raise FormatError(
            f"{source}: header needs {header} bytes, file has {len(payload)}",
            offset=len(payload),
        )
    dims = struct.unpack(f">{rank}I", payload[4:header])
    for position, dim in enumerate(dims):
        if dim == 0:
            raise FormatError(f"{source}: dimension {position} is zero", offset=4 + 4 * position)
    expected_bytes = math.prod(dims)
    if expected_bytes > MAX_IDX_ELEMENTS:
        raise FormatError(
            f"{source}: dimensions {list(dims)} overflow the {MAX_IDX_ELEMENTS}-element limit",
            offset=4,
        )
    available = len(payload) - header
    if available < expected_bytes:
        raise FormatError(
            f"{source}: truncated payload, header promises {expected_bytes} bytes but "
            f"{available} are present ({expected_bytes - available} short)",
            offset=len(payload),
        )
    if available > expected_bytes:
        raise FormatError(
            f"{source}: {available - expected_bytes} trailing bytes after the payload",
            offset=header + expected_bytes,
        )
    values = np.frombuffer(payload, dtype=np.uint8, count=expected_bytes, offset=header)
    if kind is IdxKind.LABELS:
        return values.astype(np.int64)
    count, rows, cols = dims
    return tensor_create((count, 1, rows, cols), values / 255.0)


def load_idx(path: Path, expected: IdxKind | None = None) -> Targets:
    """Images as ``[N, 1, rows, cols]`` doubles in ``[0, 1]``; labels as int64 ``[N]``."""
    return parse_idx(_read_bytes(path), str(path), expected)


def encode_idx(values: npt.ArrayLike, kind: IdxKind) -> bytes:
    array = np.asarray(values)
    if np.issubdtype(array.dtype, np.floating):
        if array.size and (array.min() < 0.0 or array.max() > 1.0):
            raise ContractError("floating IDX values must lie in [0, 1]")
        array = np.rint(array * 255.0)
    if array.size and (array.min() < 0 or array.max() > 255):
        raise ContractError("IDX values must fit in an unsigned byte")
    raw = array.astype(np.uint8)
    if kind is IdxKind.IMAGES:
        if raw.ndim == 4 and raw.shape[1] == 1:
            raw = raw[:, 0]
        if raw.ndim != 3:
            raise ShapeError(f"image IDX needs [N, rows, cols], got {list(raw.shape)}")
    elif raw.ndim != 1:
        raise ShapeError(f"label IDX needs [N], got {list(raw.shape)}")
    header = struct.pack(f">I{raw.ndim}I", kind.value, *raw.shape)
    return header + raw.tobytes()


def write_idx(path: Path, values: npt.ArrayLike, kind: IdxKind) -> None:
    payload = encode_idx(values, kind)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


def _find_mnist_file(root: Path, name: str) -> Path:
    dotted = name.replace("-idx", ".idx")
    for candidate in (name, f"{name}.gz", dotted, f"{dotted}.gz"):
        if (root / candidate).is_file():
            return root / candidate
    raise FileNotFoundError(f"MNIST file {name}[.gz] not found under {root}")


def load_mnist(root: Path, split: str) -> Dataset:
    try:
        image_name, label_name = MNIST_FILES[split]
    except KeyError as exc:
        raise ConfigurationError(f"MNIST split must be train or test, got {split!r}") from exc
    images = load_idx(_find_mnist_file(root, image_name), IdxKind.IMAGES)
    labels = load_idx(_find_mnist_file(root, label_name), IdxKind.LABELS)
    if len(images) != len(labels):
        raise FormatError(
            f"MNIST {split}: {len(images)} images but {len(labels)} labels", offset=4
        )
    LOGGER.info("Loaded MNIST %s split: %d samples from %s", split, len(labels), root)
    return Dataset(images, labels, Provenance(f"mnist-{split}"))


def reduction_size(count: int, fraction: float) -> int:
    # Half-up rounding of fraction * N.
    return math.floor(fraction * count + 0.5)


def sample_reduction(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform subset without replacement of ``round(fraction * N)`` samples, in source order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"reduction fraction must be in (0, 1], got {fraction}")
    size = reduction_size(dataset.size, fraction)
    if size == 0:
        raise ConfigurationError(
            f"fraction {fraction:g} of {dataset.size} samples leaves an empty training set"
        )
    chosen = np.sort(rng_stream(seed, "reduction").permutation(dataset.size)[:size])
    provenance = replace(
        dataset.provenance, fraction=dataset.provenance.fraction * fraction, seed=seed
    )
    return dataset.subset(chosen, provenance)


def patch_count(height: int, width: int, patch: int, stride: int) -> int:
    return ((height - patch) // stride + 1) * ((width - patch) // stride + 1)


def extract_patches(image: Tensor, patch: int, stride: int) -> list[Tensor]:
    """Every fully contained ``patch x patch`` window over the last two axes, row-major."""
    height, width = image.shape[-2:]
    if patch < 1 or stride < 1:
        raise ConfigurationError(f"patch and stride must be >= 1, got {patch} and {stride}")
    if patch > height or patch > width:
        raise ConfigurationError(f"patch {patch} exceeds image {height}x{width}")
    axes = (image.ndim - 2, image.ndim - 1)
    windows = sliding_window_view(image, (patch, patch), axis=axes)
    windows = windows[..., ::stride, ::stride, :, :]
    rows, cols = windows.shape[-4], windows.shape[-3]
    return [windows[..., row, col, :, :] for row in range(rows) for col in range(cols)]


def as_binary_map(values: npt.ArrayLike) -> BinaryMap:
    array = np.asarray(values)
    if array.ndim != 2:
        raise ShapeError(f"binary maps are 2-D, got shape {list(array.shape)}")
    if not np.isin(array, (0, 1)).all():
        raise ContractError("binary maps may only contain 0 and 1")
    return array.astype(np.uint8)


def dilate(binary: npt.ArrayLike, iterations: int = 1) -> BinaryMap:
    """Square 3x3 dilation, clipped at the borders, applied ``iterations`` times."""
    if iterations < 0:
        raise ContractError(f"iterations must be >= 0, got {iterations}")
    result = as_binary_map(binary)
    for _ in range(iterations):
        padded = np.pad(result, 1)
        result = sliding_window_view(padded, (3, 3)).max(axis=(-2, -1))
    return np.ascontiguousarray(result, dtype=np.uint8)


def quadratic_features(latent: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """``[z, z_i * z_j for i <= j]``, width ``d (d + 3) / 2``."""
    rows, cols = np.triu_indices(latent.shape[1])
    return np.concatenate([latent, latent[:, rows] * latent[:, cols]], axis=1)


def render_landmarks(targets: npt.NDArray[np.float64], image_size: int) -> Tensor:
    """Draw each ``(x, y)`` target pair as a Gaussian spot on a ``[N, 1, s, s]`` canvas."""
    points = targets.reshape(len(targets), -1, 2)
    centers = np.clip((points * 0.35 + 0.5) * (image_size - 1), 0.0, image_size - 1.0)
    grid = np.arange(image_size, dtype=np.float64)
    spread = 2.0 * LANDMARK_SIGMA**2
    across = np.exp(-((grid - centers[..., 0:1]) ** 2) / spread)
    down = np.exp(-((grid - centers[..., 1:2]) ** 2) / spread)
    canvas = np.einsum("nki,nkj->nij", down, across)
    return tensor_create((len(targets), 1, image_size, image_size), canvas)


def synth_manifold_regression(
    n: int,
    latent_dim: int,
    ambient_dim: int,
    noise: float,
    seed: int,
    *,
    embedding_seed: int = 0,
    image_size: int = 16,
    split: str = "train",
) -> Dataset:
    """Images of landmarks whose coordinates lie on a quadratic ``latent_dim`` manifold.

    The embedding depends only on ``embedding_seed`` so train and test splits share it.
    """
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    if not 1 <= latent_dim < ambient_dim:
        raise ConfigurationError(
            f"latent_dim must be in [1, ambient_dim), got {latent_dim} and {ambient_dim}"
        )
    if ambient_dim % 2:
        raise ConfigurationError(f"ambient_dim holds (x, y) pairs and must be even: {ambient_dim}")
    if noise < 0:
        raise ConfigurationError(f"noise must be >= 0, got {noise}")
    latent = rng_stream(seed, "manifold", split).uniform(-1.0, 1.0, size=(n, latent_dim))
    features = quadratic_features(latent)
    embedding = rng_stream(embedding_seed, "manifold-embedding").normal(
        size=(features.shape[1], ambient_dim)
    ) / math.sqrt(features.shape[1])
    targets = features @ embedding

    components = min(features.shape[1], ambient_dim)
    if n > components:
        spectrum = np.linalg.svd(targets - targets.mean(axis=0), compute_uv=False) ** 2
        captured = spectrum[:components].sum() / max(spectrum.sum(), 1e-300)
        if captured < 0.99:
            raise ContractError(
                f"quadratic embedding keeps only {captured:.4f} of the variance "
                f"in {components} components"
            )
    images = np.asarray(render_landmarks(targets, image_size))
    if noise > 0:
        images = images + rng_stream(seed, "manifold-noise", split).normal(
            scale=noise, size=images.shape
        )
    return Dataset(
        tensor_create(images.shape, images),
        tensor_create(targets.shape, targets),
        Provenance("synth-manifold", seed=seed, intrinsic_dim=latent_dim),
    )


@dataclass(frozen=True, slots=True)
class NucleiImages:
    images: Tensor
    markers: npt.NDArray[np.uint8]
    centers: tuple[tuple[tuple[int, int], ...], ...]


def synth_nuclei_images(count: int, size: int, nuclei: int, seed: int) -> NucleiImages:
    """Histology-like images of blob nuclei with dilated center-marker ground truth."""
    if count < 1 or size < 8 or nuclei < 1:
        raise ConfigurationError(
            f"need count >= 1, size >= 8 and nuclei >= 1, got {count}, {size}, {nuclei}"
        )
    rng = rng_stream(seed, "nuclei")
    grid_r, grid_c = np.mgrid[0:size, 0:size]
    images = np.empty((count, 1, size, size))
    markers = np.zeros((count, size, size), dtype=np.uint8)
    centers: list[tuple[tuple[int, int], ...]] = []
    for index in range(count):
        rows = rng.integers(3, size - 3, size=nuclei)
        cols = rng.integers(3, size - 3, size=nuclei)
        radii = rng.uniform(1.5, 3.0, size=nuclei)
        distance = (grid_r[None] - rows[:, None, None]) ** 2 + (
            grid_c[None] - cols[:, None, None]
        ) ** 2
        stain = np.exp(-distance / (2.0 * radii[:, None, None] ** 2)).max(axis=0)
        texture = rng.normal(scale=0.05, size=(size, size))
        images[index, 0] = np.clip(0.1 + 0.8 * stain + texture, 0.0, 1.0)
        markers[index, rows, cols] = 1
        markers[index] = dilate(markers[index], 1)
        centers.append(tuple(zip(rows.tolist(), cols.tolist(), strict=True)))
    return NucleiImages(
        images=tensor_create(images.shape, images), markers=markers, centers=tuple(centers)
    )


def segmentation_dataset(
    count: int, size: int, nuclei: int, patch: int, stride: int, seed: int
) -> Dataset:
    """Patches of synthetic nuclei images paired with flattened dilated-marker patches."""
    source = synth_nuclei_images(count, size, nuclei, seed)
    inputs: list[Tensor] = []
    targets: list[npt.NDArray[np.float64]] = []
    for image, marker in zip(source.images, source.markers, strict=True):
        inputs.extend(extract_patches(image, patch, stride))
        targets.extend(
            window.reshape(-1).astype(np.float64)
            for window in extract_patches(marker, patch, stride)
        )
    stacked = np.stack(inputs)
    labels = np.stack(targets)
    LOGGER.debug("Cut %d images into %d patches of %d pixels", count, len(stacked), patch)
    return Dataset(
        tensor_create(stacked.shape, stacked),
        tensor_create(labels.shape, labels),
        Provenance("synth-nuclei", seed=seed),
    )


def _sidecar(stem: Path) -> Path:
    return stem.with_name(stem.name + ".provenance.txt")


def dataset_exists(stem: Path) -> bool:
    # The sidecar is written last.
    return _sidecar(stem).is_file() and stem.with_name(stem.name + ".blocks").is_file()


def save_dataset(dataset: Dataset, stem: Path) -> None:
    """Block file with ``inputs`` and ``targets`` plus a plain-text provenance sidecar."""
    write_blocks(
        stem.with_name(stem.name + ".blocks"),
        {"inputs": dataset.inputs, "targets": dataset.targets.astype(np.float64)},
    )
    provenance = dataset.provenance
    lines = [
        f"source = {provenance.source}",
        f"fraction = {provenance.fraction!r}",
        f"seed = {'' if provenance.seed is None else provenance.seed}",
        f"intrinsic_dim = {'' if provenance.intrinsic_dim is None else provenance.intrinsic_dim}",
        f"targets = {'labels' if dataset.has_labels else 'values'}",
        f"samples = {dataset.size}",
    ]
    _sidecar(stem).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(stem: Path) -> Dataset:
    blocks = read_blocks(stem.with_name(stem.name + ".blocks"))
    fields: dict[str, str] = {}
    for line in _sidecar(stem).read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    targets: Targets = blocks["targets"]
    if fields.get("targets") == "labels":
        targets = targets.astype(np.int64)
    return Dataset(
        blocks["inputs"],
        targets,
        Provenance(
            source=fields.get("source", "unknown"),
            fraction=float(fields.get("fraction", "1.0")),
            seed=int(fields["seed"]) if fields.get("seed") else None,
            intrinsic_dim=int(fields["intrinsic_dim"]) if fields.get("intrinsic_dim") else None,
        ),
    )
