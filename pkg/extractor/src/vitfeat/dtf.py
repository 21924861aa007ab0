"""Writer/reader for the DTF1 interchange format.

This mirrors the published byte layout (magic "DTF1", dtype code 1 = f32,
ndim, u64 little-endian dims, row-major little-endian float32 payload) so
the files round-trip through the consuming engine; kept independent of it
on purpose, the format is the contract.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTF1"
F32 = 1


def write_f32(array: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0 or any(d == 0 for d in arr.shape):
        raise ValueError(f"bad tensor shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite value in tensor")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([F32, arr.ndim]))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_f32(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError("bad magic")
    if raw[4] != F32:
        raise ValueError(f"unsupported dtype code {raw[4]}")
    ndim = raw[5]
    shape = struct.unpack(f"<{ndim}Q", raw[6:6 + 8 * ndim])
    return np.frombuffer(raw[6 + 8 * ndim:], dtype="<f4").reshape(shape).copy()
