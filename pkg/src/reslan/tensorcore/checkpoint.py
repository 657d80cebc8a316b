"""Binary parameter checkpoints.

Layout (little endian): magic ``RSLNCKPT``, u32 version, u32 tensor count,
then per tensor: u32 name length, utf-8 name, u32 rank, u64 dims, f64 data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .._atomic import atomic_write_bytes
from ..errors import FormatError

MAGIC = b"RSLNCKPT"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
