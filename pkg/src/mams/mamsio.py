"""Flat binary tensor format.

Layout of one record (all integers little-endian)::

    b"MAMS" | version u32 | rank u32 | rank x extent u64 | float64 payload (row-major)

A file may hold several records back to back; checkpoints use that to store a
parameter group in one blob.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, List, Union

import numpy as np

from .errors import InputError

MAGIC = b"MAMS"
VERSION = 1
_HEADER = struct.Struct("<4sII")

PathLike = Union[str, os.PathLike]


def write_record(fh: BinaryIO, array) -> None:
    arr = np.array(array, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    fh.write(_HEADER.pack(MAGIC, VERSION, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise InputError("truncated MAMS header")
    magic, version, rank = _HEADER.unpack(head)
    if magic != MAGIC:
        raise InputError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise InputError(f"unsupported MAMS version {version}")
    ext = fh.read(8 * rank)
    if len(ext) != 8 * rank:
        raise InputError("truncated MAMS extents")
    shape = struct.unpack(f"<{rank}Q", ext) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise InputError(f"truncated MAMS payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save(path: PathLike, arrays: Union[np.ndarray, Iterable[np.ndarray]]) -> None:
    """Write one array, or a sequence of arrays as consecutive records."""
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    with open(path, "wb") as fh:
        for arr in arrays:
            write_record(fh, arr)


def load_all(path: PathLike) -> List[np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    out = []
    while stream.tell() < len(data):
        out.append(read_record(stream))
    return out


def load(path: PathLike) -> np.ndarray:
    records = load_all(path)
    if len(records) != 1:
        raise InputError(f"{path}: expected exactly one record, found {len(records)}")
    return records[0]


def dumps(array) -> bytes:
    buf = io.BytesIO()
    write_record(buf, array)
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    return read_record(io.BytesIO(blob))
