"""Named tensor block files with a JSON manifest.

Block file layout, all integers little-endian ``u32``::

    b"CSNB" | version | block count
    per block: name length | UTF-8 name | ndim | dims... | float64 values ('<f8', row-major)
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coopsubnet.diffcore import Tensor, tensor_create

LOGGER = logging.getLogger(__name__)

MAGIC = b"CSNB"
VERSION = 1
BLOCK_SUFFIX = ".blocks"
MANIFEST_SUFFIX = ".json"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Raised when a block file or manifest is malformed or inconsistent."""


@dataclass(frozen=True, slots=True)
class Checkpoint:
    blocks: dict[str, Tensor]
    config_hash: str
    epoch: int


def encode_blocks(blocks: Mapping[str, Tensor]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(blocks))]
    for name, value in blocks.items():
        encoded = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(dim) for dim in array.shape)
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


class _Cursor:
    def __init__(self, payload: bytes, source: str) -> None:
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(
                f"{self.source}: truncated {what} at byte {self.offset}: "
                f"need {size} bytes, {len(self.payload) - self.offset} left"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        value: int = _U32.unpack(self.take(_U32.size, what))[0]
        return value


def decode_blocks(payload: bytes, source: str = "<bytes>") -> dict[str, Tensor]:
    cursor = _Cursor(payload, source)
    if cursor.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{source}: not a block file (bad magic at byte 0)")
    version = cursor.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported block format version {version}")
    blocks: dict[str, Tensor] = {}
    for _ in range(cursor.u32("block count")):
        name = cursor.take(cursor.u32("name length"), "name").decode("utf-8")
        ndim = cursor.u32("rank")
        shape = [cursor.u32("dimension") for _ in range(ndim)]
        if 0 in shape:
            raise CheckpointError(f"{source}: block {name!r} has an empty dimension")
        count = int(np.prod(shape, dtype=np.int64))
        raw = cursor.take(count * 8, f"data of block {name!r}")
        blocks[name] = tensor_create(shape or [1], np.frombuffer(raw, dtype="<f8")).reshape(shape)
    if cursor.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - cursor.offset} trailing bytes")
    return blocks


def write_blocks(path: Path, blocks: Mapping[str, Tensor]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_blocks(blocks))


def read_blocks(path: Path) -> dict[str, Tensor]:
    return decode_blocks(path.read_bytes(), str(path))


def _sibling(stem: Path, suffix: str) -> Path:
    # Run ids contain dots, so suffixes are appended rather than substituted.
    return stem.with_name(stem.name + suffix)


def save_checkpoint(
    stem: Path, blocks: Mapping[str, Tensor], *, config_hash: str, epoch: int
) -> Path:
    """Write ``<stem>.blocks`` and ``<stem>.json``; returns the manifest path."""
    block_path = _sibling(stem, BLOCK_SUFFIX)
    manifest_path = _sibling(stem, MANIFEST_SUFFIX)
    write_blocks(block_path, blocks)
    manifest = {
        "format": MAGIC.decode("ascii"),
        "version": VERSION,
        "config_hash": config_hash,
        "epoch": epoch,
        "blocks": [
            {"name": name, "shape": list(np.shape(value))} for name, value in blocks.items()
        ],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    LOGGER.debug("Wrote checkpoint %s (%d blocks, epoch %d)", manifest_path, len(blocks), epoch)
    return manifest_path


def load_checkpoint(stem: Path, *, config_hash: str | None = None) -> Checkpoint:
    manifest_path = _sibling(stem, MANIFEST_SUFFIX)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: invalid JSON manifest: {exc.msg}") from exc
    blocks = read_blocks(_sibling(stem, BLOCK_SUFFIX))
    listed = {entry["name"]: entry["shape"] for entry in manifest.get("blocks", [])}
    actual = {name: list(value.shape) for name, value in blocks.items()}
    if listed != actual:
        raise CheckpointError(f"{manifest_path}: manifest does not match the block file")
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        raise CheckpointError(
            f"{manifest_path}: written for config {manifest.get('config_hash')}, "
            f"not {config_hash}"
        )
    return Checkpoint(
        blocks=blocks,
        config_hash=str(manifest["config_hash"]),
        epoch=int(manifest["epoch"]),
    )
