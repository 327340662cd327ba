"""Binary checkpoint container.

Layout (all integers unsigned 64-bit little-endian unless noted)::

    magic   b"PLKRF1\\0"                 7 bytes
    count   number of records
    record* name_len, name (UTF-8), dtype (1 byte: 0 = f64, 1 = f32),
            rank, extents[rank], raw little-endian element bytes
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"PLKRF1\0"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BQ", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<Q")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<Q")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = take("<BQ")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype code {code}")
        shape = take(f"<{rank}Q")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: record {name!r} truncated")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                  offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    return out
