"""Versioned binary checkpoints of parameters and normalization statistics.

Layout (little-endian)::

    b"DBRF" | u32 version | u16 len + config hash | u64 step
    | u32 len + JSON metadata | u32 tensor count
    | per tensor, sorted by name:
      u16 len + name | u8 len + dtype | u8 ndim | u64 * ndim shape | u64 len + data
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigHashMismatchError,
    CorruptCheckpointError,
)

logger = logging.getLogger(__name__)

MAGIC = b"DBRF"
FORMAT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    config_hash: str
    step: int
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _pack_str(text: str, width: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        _pack_str(ckpt.config_hash, "H"),
        struct.pack("<Q", ckpt.step),
    ]
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":"))
    parts.append(_pack_str(meta, "I"))
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        parts.append(_pack_str(name, "H"))
        parts.append(_pack_str(arr.dtype.str, "B"))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = np.ascontiguousarray(arr).tobytes()
        parts.append(struct.pack("<Q", len(data)) + data)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, block: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(self.path, block)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, block: str):
        raw = self.take(struct.calcsize(fmt), block)
        return struct.unpack(fmt, raw)

    def text(self, width: str, block: str) -> str:
        (size,) = self.unpack(f"<{width}", block)
        try:
            return self.take(size, block).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError(self.path, block, "bad text") from None


def decode_checkpoint(buf: bytes, path: str = "<memory>") -> Checkpoint:
    reader = _Reader(buf, path)
    if reader.take(len(MAGIC), "header") != MAGIC:
        raise CheckpointError(f"{path} is not a dbarf checkpoint (bad magic bytes)")
    (version,) = reader.unpack("<I", "header")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    config_hash = reader.text("H", "header")
    (step,) = reader.unpack("<Q", "header")
    try:
        metadata = json.loads(reader.text("I", "metadata"))
    except json.JSONDecodeError:
        raise CorruptCheckpointError(path, "metadata", "bad JSON") from None
    (count,) = reader.unpack("<I", "tensor table")
    tensors = {}
    for index in range(count):
        block = f"tensor #{index}"
        name = reader.text("H", block)
        block = name
        dtype = np.dtype(reader.text("B", block))
        (ndim,) = reader.unpack("<B", block)
        shape = reader.unpack(f"<{ndim}Q", block)
        (size,) = reader.unpack("<Q", block)
        if size != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(path, block, "size mismatch")
        data = reader.take(size, block)
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(buf):
        raise CorruptCheckpointError(path, "trailer", "trailing bytes")
    return Checkpoint(config_hash, step, tensors, metadata, version)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint at step {ckpt.step} to {path}")


def load_checkpoint(
    path: Union[str, Path], expected_hash: Optional[str] = None
) -> Checkpoint:
    """Read a checkpoint, refusing it if its architecture hash differs."""
    ckpt = decode_checkpoint(Path(path).read_bytes(), str(path))
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise ConfigHashMismatchError(expected_hash, ckpt.config_hash)
    logger.info(f"Loaded checkpoint {path} (step {ckpt.step}, {len(ckpt.tensors)} tensors)")
    return ckpt
