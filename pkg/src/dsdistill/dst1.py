"""DST1 tensor file format.

Layout: magic bytes ``DST1``, u8 rank (1..4), rank little-endian u32
extents, then product-many little-endian f64 values in row-major order.
Every dump/load path in the package goes through this module.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DST1"
MAX_RANK = 4


def dump_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if not 1 <= a.ndim <= MAX_RANK:
        raise ValueError(f"DST1 stores rank 1..{MAX_RANK}, got rank {a.ndim}")
    head = MAGIC + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f8").tobytes()


def load_bytes(buf: bytes) -> np.ndarray:
    f = io.BytesIO(buf)
    return _read(f)


def dump(a: np.ndarray, path) -> None:
    Path(path).write_bytes(dump_bytes(a))


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return _read(f)


def _read(f) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    rank = struct.unpack("<B", f.read(1))[0]
    if not 1 <= rank <= MAX_RANK:
        raise ValueError(f"bad rank {rank}")
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape))
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise ValueError("truncated DST1 payload")
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
