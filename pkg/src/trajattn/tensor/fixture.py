"""Bit-exact binary tensor fixtures.

Layout (little-endian):

    bytes 0..3   magic "TNSR"
    byte  4      format version, currently 1
    byte  5      dtype: 0 = float64, 1 = float32
    bytes 6..7   rank as u16 (at most 8)
    next rank*8  dimension sizes as u64
    rest         row-major payload

Used by test fixtures and CLI dumps; write followed by read returns a
bitwise-identical array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["FixtureError", "write_tensor", "read_tensor", "MAGIC", "MAX_RANK"]

MAGIC = b"TNSR"
VERSION = 1
MAX_RANK = 8

_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class FixtureError(ValueError):
    """Malformed tensor fixture file."""


def write_tensor(path, arr) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8", copy=False)
    elif arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    else:
        raise FixtureError(f"unsupported dtype {arr.dtype}; use float64 or float32")
    if arr.ndim > MAX_RANK:
        raise FixtureError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = MAGIC + struct.pack("<BBH", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FixtureError("truncated payload: header incomplete")
    if raw[:4] != MAGIC:
        raise FixtureError("bad magic")
    version, dtype_code, rank = struct.unpack("<BBH", raw[4:8])
    if version != VERSION:
        raise FixtureError(f"unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FixtureError(f"unknown dtype code {dtype_code}")
    if rank > MAX_RANK:
        raise FixtureError(f"rank {rank} exceeds maximum {MAX_RANK}")
    dims_end = 8 + 8 * rank
    if len(raw) < dims_end:
        raise FixtureError("truncated payload: dimension table incomplete")
    shape = struct.unpack(f"<{rank}Q", raw[8:dims_end])
    dtype = _CODE_DTYPES[dtype_code]
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + count * dtype.itemsize
    if len(raw) < expected:
        raise FixtureError("truncated payload")
    if len(raw) > expected:
        raise FixtureError(f"trailing bytes: expected {expected}, file has {len(raw)}")
    data = np.frombuffer(raw[dims_end:expected], dtype=dtype)
    return data.reshape(shape).copy()
