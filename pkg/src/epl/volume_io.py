"""EPLV: a minimal bit-exact volume/tensor file format.

Layout (all integers little-endian)::

    magic    4 bytes  b"EPLV"
    version  u16      1
    dtype    u8       1 = float32, 2 = float64, 3 = uint8 labels
    rank     u8       0..5
    extents  rank x u32
    payload  row-major values, little-endian
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"EPLV"
VERSION = 1
MAX_RANK = 5

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_BY_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


def _as_array(obj) -> np.ndarray:
    data = getattr(obj, "data", obj)
    return np.asarray(data)


def dtype_code(arr: np.ndarray) -> int:
    try:
        return _BY_KIND[np.dtype(arr.dtype).newbyteorder("=")]
    except KeyError:
        raise FormatError(f"dtype {arr.dtype} is not storable (float32, float64, uint8)") from None


def encode(obj) -> bytes:
    arr = _as_array(obj)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    code = dtype_code(arr)
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at ``offset``; return (array, offset after it)."""
    view = memoryview(buf)
    if len(view) - offset < 8:
        raise FormatError("truncated header")
    if bytes(view[offset:offset + 4]) != MAGIC:
        raise FormatError("bad magic, not an EPLV record")
    version, code, rank = struct.unpack_from("<HBB", view, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported EPLV version {version}")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds {MAX_RANK}")
    pos = offset + 8
    if len(view) - pos < 4 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}I", view, pos)
    pos += 4 * rank
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(view) - pos}")
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write(path, obj) -> None:
    data = encode(obj)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{os.fspath(path)}: {len(buf) - end} trailing bytes")
    return arr
