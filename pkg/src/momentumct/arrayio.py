"""Self-describing binary container for dense arrays (``.mcta``).

Layout, all little-endian::

    4 bytes   magic b"MCTA"
    1 byte    format version (1)
    1 byte    dtype code (see DTYPE_CODES)
    1 byte    rank
    8*rank    dims, uint64
    ...       row-major payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MCTA"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("u1")}


class ArrayFileError(ValueError):
    """Base class for container decoding problems."""


class BadMagicError(ArrayFileError):
    pass


class BadHeaderError(ArrayFileError):
    pass


class TruncatedPayloadError(ArrayFileError):
    pass


class ShapeMismatchError(ArrayFileError):
    pass


class DegenerateArrayError(ArrayFileError):
    pass


def encode_array(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.size == 0:
        raise DegenerateArrayError(f"refusing to store degenerate array of shape {arr.shape}")
    if arr.ndim > 255:
        raise BadHeaderError("rank exceeds 255")
    code = next((c for c, dt in DTYPE_CODES.items() if dt == arr.dtype.newbyteorder("<")), None)
    if code is None:
        raise BadHeaderError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_array(buf: bytes, expected_shape=None) -> np.ndarray:
    if len(buf) < 7:
        raise BadHeaderError(f"header truncated ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise BadHeaderError(f"unsupported format version {version}")
    if code not in DTYPE_CODES:
        raise BadHeaderError(f"unknown dtype code {code}")
    if rank == 0:
        raise DegenerateArrayError("rank-0 array in file")
    off = 7 + 8 * rank
    if len(buf) < off:
        raise BadHeaderError("header truncated inside dims")
    shape = struct.unpack_from(f"<{rank}Q", buf, 7)
    if 0 in shape:
        raise DegenerateArrayError(f"degenerate shape {shape} in file")
    if expected_shape is not None and tuple(expected_shape) != tuple(shape):
        raise ShapeMismatchError(f"stored shape {shape} != expected {tuple(expected_shape)}")
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(buf) - off < nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, expected {nbytes}")
    if len(buf) - off > nbytes:
        raise BadHeaderError(f"{len(buf) - off - nbytes} trailing bytes after payload")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_array(path, arr) -> None:
    atomic_write_bytes(path, encode_array(arr))


def load_array(path, expected_shape=None) -> np.ndarray:
    return decode_array(Path(path).read_bytes(), expected_shape)
