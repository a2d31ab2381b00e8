"""Minimal MVF tensor container I/O.

The registration engine consumes feature volumes from MVF files; this
module emits the identical byte layout: magic "MVF1", one dtype byte
(0 = float32, 1 = uint8, 2 = int32), one ndim byte, two zero bytes,
ndim little-endian uint64 dims, then the row-major payload with the
last dim fastest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVF1"

_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}
_CODE_FOR = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<i4"): 2}


class MVFError(Exception):
    """Malformed or undecodable MVF file."""


def write_mvf(path, array: np.ndarray) -> None:
    """Write a 3D or 4D array; floats are stored as float32, integer
    arrays as int32."""
    arr = np.asarray(array)
    if arr.ndim not in (3, 4):
        raise ValueError(f"MVF payload must be 3D or 4D, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        payload = np.ascontiguousarray(arr, dtype="<f4")
    elif np.issubdtype(arr.dtype, np.integer):
        payload = np.ascontiguousarray(arr, dtype="<i4")
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(payload.astype(np.float64))):
        raise ValueError("payload contains non-finite values")
    code = _CODE_FOR[payload.dtype]
    header = MAGIC + bytes([code, payload.ndim, 0, 0])
    header += struct.pack(f"<{payload.ndim}Q", *payload.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_mvf(path) -> np.ndarray:
    """Read an MVF payload back as float32/uint8/int32."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MVFError(f"{path}: shorter than header")
    if raw[:4] != MAGIC:
        raise MVFError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = raw[4], raw[5]
    if code not in _CODES:
        raise MVFError(f"{path}: unknown dtype code {code}")
    if ndim not in (3, 4):
        raise MVFError(f"{path}: unsupported ndim {ndim}")
    head = 8 + 8 * ndim
    if len(raw) < head:
        raise MVFError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", raw[8:head])
    count = int(np.prod(dims))
    dtype = _CODES[code]
    if len(raw) - head != count * dtype.itemsize:
        raise MVFError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).copy()
