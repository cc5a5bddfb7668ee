"""CMT1 tensor records.

Layout: ``b"CMT1"``, u32 dtype tag (0 = float32, 1 = float64), u32 rank,
rank x u64 extents, then the raw little-endian values in row-major order.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"CMT1"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"cannot serialise dtype {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<II", _TAGS[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    tag, rank = struct.unpack("<II", _read_exact(f, 8))
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    dtype = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(f, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def atomic_write(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise FormatError(f"trailing bytes after tensor in {path}")
    return arr
