"""Bit-exact on-disk tensor containers.

Layout: magic ``DBPT``, version u8 = 1, dtype code u8 (0 = f64), rank u8,
rank x u64 little-endian extents, then the raw little-endian f64 payload
in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DBPT"
VERSION = 1
DTYPE_F64 = 0


class DataError(Exception):
    """Missing, truncated, or malformed on-disk data."""


def save_tensor(path, arr: np.ndarray) -> None:
    # asarray keeps 0-d extents (ascontiguousarray would promote to (1,))
    arr = np.asarray(arr, dtype=np.float64)
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor container {path}: {e}") from e
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor container (bad magic)")
    version, dtype, rank = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    if dtype != DTYPE_F64:
        raise DataError(f"{path}: unsupported dtype code {dtype}")
    offset = 7
    if len(raw) < offset + 8 * rank:
        raise DataError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) != offset + 8 * count:
        raise DataError(
            f"{path}: payload size mismatch, expected {8 * count} bytes, got {len(raw) - offset}"
        )
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return arr.reshape(shape).astype(np.float64)
