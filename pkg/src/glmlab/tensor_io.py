"""GLMT binary tensor files.

Layout (little-endian)::

    b"GLMT" | u8 version=1 | u8 dtype | u32 rank | u64 dims[rank] | payload

dtype codes: 0=f64, 1=f32, 2=i8. Payload is row-major.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GLMT"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("i1")}
CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int8"): 2}
_HEADER = struct.Struct("<4sBBI")


class FormatError(ValueError):
    """File is not a well-formed GLMT tensor."""


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype}")
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
    return _HEADER.pack(MAGIC, VERSION, code, array.ndim) + dims + payload


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, code, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = _HEADER.size
    if len(blob) < off + 8 * rank:
        raise FormatError("truncated dimension table")
    dims = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    dtype = DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - off != n * dtype.itemsize:
        raise FormatError(
            f"payload is {len(blob) - off} bytes, expected {n * dtype.itemsize}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path: str | os.PathLike, array) -> Path:
    path = Path(path)
    data = array.data if hasattr(array, "requires_grad") else array
    path.write_bytes(encode(np.asarray(data)))
    return path


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())


def tensor_io(path, mode: str, array=None):
    """``mode='r'`` returns the stored array; ``mode='w'`` writes ``array``."""
    if mode == "r":
        return read_tensor(path)
    if mode == "w":
        if array is None:
            raise ValueError("write mode needs an array")
        return write_tensor(path, array)
    raise ValueError(f"mode must be 'r' or 'w', not {mode!r}")
