"""RMT1 tensor container files.

Layout (all integers little-endian)::

    0-3   magic b"RMT1"
    4     version (1)
    5     dtype code (1 = float32, 2 = float64)
    6-7   reserved, zero
    8-11  u32 rank
    ...   rank x u64 extents
    ...   row-major payload
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, LoadError

MAGIC = b"RMT1"
VERSION = 1
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _CODES:
        raise DimensionError(f"RMT1 stores float32/float64 only, got {a.dtype}")
    header = MAGIC + struct.pack("<BBH", VERSION, _CODES[a.dtype], 0)
    header += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_DTYPES[_CODES[a.dtype]]).tobytes()
    return header + payload


def decode(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise LoadError(f"{name}: not an RMT1 file")
    version, code, reserved = struct.unpack_from("<BBH", buf, 4)
    if version != VERSION or code not in _DTYPES or reserved != 0:
        raise LoadError(f"{name}: unsupported RMT1 header (version={version}, dtype={code})")
    (rank,) = struct.unpack_from("<I", buf, 8)
    off = 12 + 8 * rank
    if len(buf) < off:
        raise LoadError(f"{name}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + count * dtype.itemsize:
        raise LoadError(f"{name}: payload size does not match shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, array) -> None:
    """Write ``array`` atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(array))
    os.replace(tmp, path)


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return decode(buf, str(path))
