"""Grid tensor types and the MVF binary container.

Axis convention used throughout the package: a grid has dims (H, W, D)
and a continuous coordinate (x, y, z) indexes those axes in that order,
so ``data[x, y, z]`` lives at coordinate (x, y, z).  Arrays are C-order,
which makes D the fastest-varying axis.

All tensor types are immutable after construction (their arrays are
frozen), so instances can be shared freely across threads.  Computation
is done in float64; MVF files store float32 (scalars/vectors) or int32
(labels).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MVF_MAGIC = b"MVF1"

DTYPE_F32 = 0
DTYPE_U8 = 1
DTYPE_I32 = 2

_NP_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_U8: np.dtype("u1"),
    DTYPE_I32: np.dtype("<i4"),
}

# Guard against absurd headers before allocating anything.
_MAX_ELEMENTS = 2**40


class MVFError(Exception):
    """Malformed or undecodable MVF file."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three positive voxel counts, got {dims}")
    return dims


class Volume:
    """Scalar 3D image with physical voxel spacing in millimeters."""

    def __init__(self, data, spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {data.shape}")
        _check_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume data contains non-finite values")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive reals, got {spacing}")
        self.data = _frozen(data)
        self.spacing = spacing

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing})"


class FeatureVolume:
    """Channel-first 4D embedding grid aligned to a Volume."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 4:
            raise ValueError(f"FeatureVolume data must be 4D (C,H,W,D), got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("FeatureVolume needs at least one channel")
        _check_dims(data.shape[1:])
        if not np.all(np.isfinite(data)):
            raise ValueError("FeatureVolume data contains non-finite values")
        self.data = _frozen(data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def __repr__(self):
        return f"FeatureVolume(channels={self.channels}, dims={self.dims})"


class LabelVolume:
    """Integer segmentation grid; label 0 is reserved for background."""

    def __init__(self, labels):
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ValueError(f"LabelVolume data must be 3D, got shape {labels.shape}")
        _check_dims(labels.shape)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int32)
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.labels = _frozen(labels)
        self.label_set = tuple(int(v) for v in np.unique(labels))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def foreground_labels(self) -> tuple[int, ...]:
        return tuple(v for v in self.label_set if v != 0)

    def __repr__(self):
        return f"LabelVolume(dims={self.dims}, label_set={self.label_set})"


class DisplacementField:
    """Per-voxel 3-vectors in voxel units, component-first (3, H, W, D).

    A stationary velocity field is carried by the same type; the role is
    decided by how the field is used (see ``fields.integrate_velocity``).
    """

    def __init__(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 4 or vectors.shape[0] != 3:
            raise ValueError(
                f"DisplacementField needs shape (3,H,W,D), got {vectors.shape}"
            )
        _check_dims(vectors.shape[1:])
        if not np.all(np.isfinite(vectors)):
            raise ValueError("DisplacementField contains non-finite values")
        self.vectors = _frozen(vectors)

    @classmethod
    def zeros(cls, dims) -> "DisplacementField":
        dims = _check_dims(dims)
        return cls(np.zeros((3, *dims)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[1:]

    def __repr__(self):
        return f"DisplacementField(dims={self.dims})"


VelocityField = DisplacementField

Tensor = Volume | FeatureVolume | LabelVolume | DisplacementField


def _sidecar_path(path: Path) -> Path:
    if path.suffix == ".mvf":
        return path.with_suffix(".meta.json")
    return path.with_name(path.name + ".meta.json")


def write_mvf(path, tensor: Tensor) -> None:
    """Serialize a tensor to the MVF container.

    Layout: magic "MVF1", 1 byte dtype code (0=f32, 1=u8, 2=i32), 1 byte
    ndim, 2 zero bytes, ndim little-endian u64 dims, then the payload
    row-major with the last dim fastest.  Volumes additionally get a
    ``<name>.meta.json`` sidecar carrying their spacing.
    """
    path = Path(path)
    if isinstance(tensor, Volume):
        code, payload = DTYPE_F32, tensor.data.astype("<f4")
    elif isinstance(tensor, FeatureVolume):
        code, payload = DTYPE_F32, tensor.data.astype("<f4")
    elif isinstance(tensor, LabelVolume):
        code, payload = DTYPE_I32, tensor.labels.astype("<i4")
    elif isinstance(tensor, DisplacementField):
        code, payload = DTYPE_F32, tensor.vectors.astype("<f4")
    else:
        raise TypeError(f"cannot serialize {type(tensor).__name__}")
    dims = payload.shape
    header = MVF_MAGIC + bytes([code, len(dims), 0, 0])
    header += struct.pack(f"<{len(dims)}Q", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    if isinstance(tensor, Volume):
        meta = {"spacing": list(tensor.spacing)}
        _sidecar_path(path).write_text(json.dumps(meta) + "\n")


def _read_spacing(path: Path) -> tuple[float, float, float]:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        return (1.0, 1.0, 1.0)
    try:
        meta = json.loads(sidecar.read_text())
        sx, sy, sz = meta["spacing"]
        return (float(sx), float(sy), float(sz))
    except (ValueError, KeyError, TypeError) as exc:
        raise MVFError(f"corrupt sidecar {sidecar}: {exc}") from exc


def read_mvf(path, kind: str = "auto") -> Tensor:
    """Read an MVF file back into a tensor.

    ``kind`` selects the decoded type where the header is ambiguous:
    "auto" maps 3D float payloads to Volume, 3D integer payloads to
    LabelVolume and 4D payloads to FeatureVolume; "field" requires a 4D
    float payload with leading dim 3 and returns a DisplacementField.
    """
    if kind not in ("auto", "volume", "labels", "features", "field"):
        raise ValueError(f"unknown kind {kind!r}")
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise MVFError(f"{path}: file shorter than header")
    if raw[:4] != MVF_MAGIC:
        raise MVFError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = raw[4], raw[5]
    if raw[6:8] != b"\x00\x00":
        raise MVFError(f"{path}: corrupt header padding")
    if code not in _NP_DTYPES:
        raise MVFError(f"{path}: unknown dtype code {code}")
    if ndim not in (3, 4):
        raise MVFError(f"{path}: unsupported ndim {ndim}")
    head = 8 + 8 * ndim
    if len(raw) < head:
        raise MVFError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", raw[8:head])
    if any(d < 1 for d in dims):
        raise MVFError(f"{path}: invalid dims {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise MVFError(f"{path}: dims overflow {dims}")
    dtype = _NP_DTYPES[code]
    expected = count * dtype.itemsize
    if len(raw) - head < expected:
        raise MVFError(f"{path}: truncated payload ({len(raw) - head} of {expected} bytes)")
    if len(raw) - head > expected:
        raise MVFError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims)

    if kind == "field":
        if ndim != 4 or dims[0] != 3 or code != DTYPE_F32:
            raise MVFError(f"{path}: not a displacement field (dims {dims}, dtype {code})")
        return DisplacementField(data.astype(np.float64))
    if ndim == 4:
        if kind not in ("auto", "features"):
            raise MVFError(f"{path}: expected 3D payload for kind={kind!r}")
        if code != DTYPE_F32:
            raise MVFError(f"{path}: feature payload must be float32")
        return FeatureVolume(data.astype(np.float64))
    # ndim == 3
    if kind == "features":
        raise MVFError(f"{path}: expected 4D payload for kind='features'")
    is_labels = code in (DTYPE_U8, DTYPE_I32)
    if kind == "labels" or (kind == "auto" and is_labels):
        if not is_labels:
            raise MVFError(f"{path}: label payload must be integer typed")
        return LabelVolume(data.astype(np.int32))
    if is_labels:
        raise MVFError(f"{path}: volume payload must be float32")
    return Volume(data.astype(np.float64), spacing=_read_spacing(path))
