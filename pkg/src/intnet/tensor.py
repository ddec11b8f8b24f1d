"""Exact arithmetic primitives and the binary tensor blob format.

Tensors are plain numpy arrays restricted to a handful of element kinds.
Every module rounds through :func:`round_half_away` so that float-side
bookkeeping and the integer engine agree on ties.
"""

from __future__ import annotations

import math
import struct
from enum import IntEnum
from fractions import Fraction
from pathlib import Path

import numpy as np

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class Kind(IntEnum):
    FLOAT32 = 0
    INT8 = 1
    INT32 = 2
    UINT8 = 3
    INT64 = 4
    INT16 = 5


_DTYPES = {
    Kind.FLOAT32: np.dtype("<f4"),
    Kind.INT8: np.dtype("i1"),
    Kind.INT32: np.dtype("<i4"),
    Kind.UINT8: np.dtype("u1"),
    Kind.INT64: np.dtype("<i8"),
    Kind.INT16: np.dtype("<i2"),
}


class TensorFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def kind_of(arr: np.ndarray) -> Kind:
    for kind, dtype in _DTYPES.items():
        if arr.dtype == dtype.newbyteorder("="):
            return kind
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def dtype_of(kind: Kind) -> np.dtype:
    return _DTYPES[Kind(kind)]


def round_half_away(x):
    """Round to the nearest integer, ties away from zero.

    Python ints and Fractions are rounded exactly and return an ``int``;
    floats return an ``int``; arrays return an int64 array of the same shape.
    """
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return int(x)
    if isinstance(x, Fraction):
        mag = math.floor(abs(x) + Fraction(1, 2))
        return -mag if x < 0 else mag
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise ValueError(f"cannot round non-finite value {x!r}")
        t = math.trunc(x)
        frac = x - t  # exact for binary floats
        if abs(frac) >= 0.5:
            t += 1 if x > 0 else -1
        return int(t)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot round non-finite values")
    t = np.trunc(arr)
    bump = np.where(np.abs(arr - t) >= 0.5, np.sign(arr), 0.0)
    return (t + bump).astype(np.int64)


def saturate(x, lo: int, hi: int):
    """Clamp ``x`` into ``[lo, hi]``; works on ints and integer arrays."""
    if lo > hi:
        raise ValueError(f"saturate bounds reversed: lo={lo} > hi={hi}")
    if isinstance(x, np.ndarray):
        return np.clip(x, lo, hi)
    return min(max(x, lo), hi)


def fits_int32(arr: np.ndarray) -> bool:
    if arr.size == 0:
        return True
    return int(arr.min()) >= INT32_MIN and int(arr.max()) <= INT32_MAX


# -- blob format -------------------------------------------------------------
# kind tag (u8) | rank (u8) | dims (u32 each) | raw little-endian elements


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    kind = kind_of(arr)
    if arr.ndim > 255:
        raise ValueError("rank too large for blob header")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor dims must be positive, got {arr.shape}")
    header = struct.pack(f"<BB{arr.ndim}I", int(kind), arr.ndim, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=dtype_of(kind)).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; return (array, end offset)."""
    if offset + 2 > len(buf):
        raise TensorFormatError("truncated tensor header", offset)
    tag, rank = struct.unpack_from("<BB", buf, offset)
    try:
        kind = Kind(tag)
    except ValueError:
        raise TensorFormatError(f"unknown tensor kind tag {tag}", offset) from None
    pos = offset + 2
    if pos + 4 * rank > len(buf):
        raise TensorFormatError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if any(d == 0 for d in dims):
        raise TensorFormatError("zero-sized tensor dimension", offset + 2)
    dtype = dtype_of(kind)
    nbytes = math.prod(dims) * dtype.itemsize
    if pos + nbytes > len(buf):
        raise TensorFormatError("truncated tensor payload", pos)
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=pos)
    arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return arr, pos + nbytes


def payload_nbytes(arr: np.ndarray) -> int:
    return int(arr.size) * dtype_of(kind_of(arr)).itemsize


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after tensor", end)
    return arr
