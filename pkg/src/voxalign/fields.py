"""Deformation-field algebra: sampling, warping, velocity integration,
composition, pyramid resizing and Jacobian analysis.

Warping is backward: ``warp(vol, u)(x) = vol(x + u(x))``.  Sample
coordinates outside the grid are clamped to the border (replication).
Displacements are in voxel units of the grid they live on.  Everything
here is a pure function of immutable inputs and uses fixed-order numpy
reductions, so results are bit-identical across runs and thread counts.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .tensors import DisplacementField, FeatureVolume, LabelVolume, Volume

_GRID_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


@njit(cache=True)
def _trilinear_values(data, pos):
    """Clamped trilinear sampling of a (C, H, W, D) stack at pos (3, n)."""
    C, H, W, D = data.shape
    n = pos.shape[1]
    out = np.empty((C, n))
    for i in range(n):
        x = min(max(pos[0, i], 0.0), H - 1.0)
        y = min(max(pos[1, i], 0.0), W - 1.0)
        z = min(max(pos[2, i], 0.0), D - 1.0)
        ix = min(int(x), H - 2) if H > 1 else 0
        iy = min(int(y), W - 2) if W > 1 else 0
        iz = min(int(z), D - 2) if D > 1 else 0
        tx = x - ix if H > 1 else 0.0
        ty = y - iy if W > 1 else 0.0
        tz = z - iz if D > 1 else 0.0
        jx = ix + 1 if H > 1 else 0
        jy = iy + 1 if W > 1 else 0
        jz = iz + 1 if D > 1 else 0
        for c in range(C):
            c00 = data[c, ix, iy, iz] * (1.0 - tz) + data[c, ix, iy, jz] * tz
            c01 = data[c, ix, jy, iz] * (1.0 - tz) + data[c, ix, jy, jz] * tz
            c10 = data[c, jx, iy, iz] * (1.0 - tz) + data[c, jx, iy, jz] * tz
            c11 = data[c, jx, jy, iz] * (1.0 - tz) + data[c, jx, jy, jz] * tz
            c0 = c00 * (1.0 - ty) + c01 * ty
            c1 = c10 * (1.0 - ty) + c11 * ty
            out[c, i] = c0 * (1.0 - tx) + c1 * tx
    return out


@njit(cache=True)
def _trilinear_with_grads(data, pos):
    """Like _trilinear_values but also returns d(value)/d(position),
    gated to zero where the raw position left the grid."""
    C, H, W, D = data.shape
    n = pos.shape[1]
    out = np.empty((C, n))
    grads = np.empty((C, 3, n))
    for i in range(n):
        px, py, pz = pos[0, i], pos[1, i], pos[2, i]
        x = min(max(px, 0.0), H - 1.0)
        y = min(max(py, 0.0), W - 1.0)
        z = min(max(pz, 0.0), D - 1.0)
        ix = min(int(x), H - 2) if H > 1 else 0
        iy = min(int(y), W - 2) if W > 1 else 0
        iz = min(int(z), D - 2) if D > 1 else 0
        tx = x - ix if H > 1 else 0.0
        ty = y - iy if W > 1 else 0.0
        tz = z - iz if D > 1 else 0.0
        jx = ix + 1 if H > 1 else 0
        jy = iy + 1 if W > 1 else 0
        jz = iz + 1 if D > 1 else 0
        gx = 1.0 if (0.0 < px < H - 1.0) else 0.0
        gy = 1.0 if (0.0 < py < W - 1.0) else 0.0
        gz = 1.0 if (0.0 < pz < D - 1.0) else 0.0
        for c in range(C):
            v000 = data[c, ix, iy, iz]
            v001 = data[c, ix, iy, jz]
            v010 = data[c, ix, jy, iz]
            v011 = data[c, ix, jy, jz]
            v100 = data[c, jx, iy, iz]
            v101 = data[c, jx, iy, jz]
            v110 = data[c, jx, jy, iz]
            v111 = data[c, jx, jy, jz]
            c00 = v000 * (1.0 - tz) + v001 * tz
            c01 = v010 * (1.0 - tz) + v011 * tz
            c10 = v100 * (1.0 - tz) + v101 * tz
            c11 = v110 * (1.0 - tz) + v111 * tz
            c0 = c00 * (1.0 - ty) + c01 * ty
            c1 = c10 * (1.0 - ty) + c11 * ty
            out[c, i] = c0 * (1.0 - tx) + c1 * tx
            grads[c, 0, i] = (c1 - c0) * gx
            grads[c, 1, i] = ((c01 - c00) * (1.0 - tx) + (c11 - c10) * tx) * gy
            d00 = v001 - v000
            d01 = v011 - v010
            d10 = v101 - v100
            d11 = v111 - v110
            grads[c, 2, i] = (
                (d00 * (1.0 - ty) + d01 * ty) * (1.0 - tx)
                + (d10 * (1.0 - ty) + d11 * ty) * tx
            ) * gz
    return out, grads


@njit(cache=True)
def _nearest_values(data, pos):
    """Nearest-neighbor (round half up) clamped gather of (H, W, D) ints."""
    H, W, D = data.shape
    n = pos.shape[1]
    out = np.empty(n, dtype=data.dtype)
    for i in range(n):
        x = min(max(pos[0, i] + 0.5, 0.0), H - 1.0)
        y = min(max(pos[1, i] + 0.5, 0.0), W - 1.0)
        z = min(max(pos[2, i] + 0.5, 0.0), D - 1.0)
        out[i] = data[int(x), int(y), int(z)]
    return out


def base_grid(dims) -> np.ndarray:
    """Identity coordinates, shape (3, H*W*D), cached per dims."""
    dims = tuple(int(d) for d in dims)
    grid = _GRID_CACHE.get(dims)
    if grid is None:
        if len(_GRID_CACHE) > 32:
            _GRID_CACHE.clear()
        grid = np.indices(dims, dtype=np.float64).reshape(3, -1)
        grid.setflags(write=False)
        _GRID_CACHE[dims] = grid
    return grid


class Sampler:
    """Trilinear sampling plan for a fixed set of positions on one grid.

    Positions are clamped to [0, dim-1] per axis (border replication);
    the spatial derivative of the interpolant is gated to zero where the
    raw position left the grid.  Sampling is a strictly sequential
    kernel, so results are bit-identical regardless of thread counts.
    """

    def __init__(self, dims, pos: np.ndarray):
        if not np.all(np.isfinite(pos)):
            raise ValueError("sample positions contain non-finite values")
        self.dims = tuple(int(d) for d in dims)
        self.n = pos.shape[1]
        self._pos = np.ascontiguousarray(pos, dtype=np.float64)

    def sample_channels(self, channels: np.ndarray, need_grad: bool = False):
        """Sample a (C, H, W, D) stack (or a single (H, W, D) channel).

        Returns values (C, n), plus grads (C, 3, n) when ``need_grad``
        is set; grads are d(value)/d(position) per axis."""
        squeeze = channels.ndim == 3
        stack = channels[None] if squeeze else channels
        stack = np.ascontiguousarray(stack, dtype=np.float64)
        if stack.shape[1:] != self.dims:
            raise ValueError(f"channel dims {stack.shape[1:]} != sampler dims {self.dims}")
        if not need_grad:
            val = _trilinear_values(stack, self._pos)
            return val[0] if squeeze else val
        val, grads = _trilinear_with_grads(stack, self._pos)
        if squeeze:
            return val[0], grads[0]
        return val, grads

    def sample(self, flat: np.ndarray, need_grad: bool = False):
        """Sample one channel given as a flat (H*W*D,) array."""
        return self.sample_channels(flat.reshape(self.dims), need_grad)

    def sample_nearest(self, flat: np.ndarray) -> np.ndarray:
        """Nearest-neighbor gather (round half up) at the plan's positions."""
        data = np.ascontiguousarray(flat.reshape(self.dims))
        return _nearest_values(data, self._pos)


def warp_positions(field_vectors: np.ndarray) -> np.ndarray:
    """x + u(x) for every voxel x, shape (3, H*W*D)."""
    dims = field_vectors.shape[1:]
    return base_grid(dims) + field_vectors.reshape(3, -1)


def sample_trilinear(vol, pos):
    """Trilinear interpolation of one continuous position.

    ``vol`` may be a Volume (returns a float) or FeatureVolume (returns
    a (C,) vector).  Out-of-grid coordinates are clamped to the border.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(3, 1)
    if isinstance(vol, Volume):
        s = Sampler(vol.dims, pos)
        return float(s.sample(vol.data.reshape(-1))[0])
    if isinstance(vol, FeatureVolume):
        s = Sampler(vol.dims, pos)
        return s.sample_channels(vol.data)[:, 0].copy()
    raise TypeError(f"cannot sample {type(vol).__name__}")


def _warped_channels(data: np.ndarray, field: DisplacementField) -> np.ndarray:
    dims = field.dims
    s = Sampler(dims, warp_positions(field.vectors))
    if data.ndim == 3:
        return s.sample(data.reshape(-1)).reshape(dims)
    return s.sample_channels(data).reshape(data.shape[0], *dims)


def warp(vol, field: DisplacementField):
    """Backward-warp a Volume, FeatureVolume or DisplacementField."""
    if isinstance(vol, LabelVolume):
        raise TypeError("use warp_labels for LabelVolume inputs")
    if vol.dims != field.dims:
        raise ValueError(f"dims mismatch: {vol.dims} vs field {field.dims}")
    if isinstance(vol, Volume):
        return Volume(_warped_channels(vol.data, field), spacing=vol.spacing)
    if isinstance(vol, FeatureVolume):
        return FeatureVolume(_warped_channels(vol.data, field))
    if isinstance(vol, DisplacementField):
        return DisplacementField(_warped_channels(vol.vectors, field))
    raise TypeError(f"cannot warp {type(vol).__name__}")


def warp_labels(labels: LabelVolume, field: DisplacementField) -> LabelVolume:
    """Nearest-neighbor backward warp of a label grid."""
    if labels.dims != field.dims:
        raise ValueError(f"dims mismatch: {labels.dims} vs field {field.dims}")
    s = Sampler(field.dims, warp_positions(field.vectors))
    out = s.sample_nearest(labels.labels.reshape(-1))
    return LabelVolume(out.reshape(field.dims))


def integrate_velocity(v: DisplacementField, squaring_steps: int = 7) -> DisplacementField:
    """Displacement of exp(v) by scaling and squaring.

    Scales v down by 2**steps, then self-composes ``steps`` times:
    u <- u + u(x + u(x)).
    """
    steps = int(squaring_steps)
    if steps < 1:
        raise ValueError("squaring_steps must be >= 1")
    dims = v.dims
    u = v.vectors / float(2 ** steps)
    for _ in range(steps):
        s = Sampler(dims, base_grid(dims) + u.reshape(3, -1))
        u = u + s.sample_channels(u).reshape(3, *dims)
    return DisplacementField(u)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field equivalent to applying ``inner`` first, then ``outer``.

    result(x) = inner(x) + outer(x + inner(x)), so
    warp(vol, compose(A, B)) == warp(warp(vol, A), B) up to interpolation.
    """
    if outer.dims != inner.dims:
        raise ValueError(f"dims mismatch: {outer.dims} vs {inner.dims}")
    dims = inner.dims
    s = Sampler(dims, warp_positions(inner.vectors))
    res = inner.vectors + s.sample_channels(outer.vectors).reshape(3, *dims)
    return DisplacementField(res)


def _axis_coords(src: int, tgt: int) -> np.ndarray:
    # align-corners mapping from target index to source coordinate
    if tgt == 1:
        return np.zeros(1)
    if src == 1:
        return np.zeros(tgt)
    return np.arange(tgt, dtype=np.float64) * ((src - 1) / (tgt - 1))


def resample_channels(data: np.ndarray, target_dims) -> np.ndarray:
    """Trilinear align-corners resampling of a (C, H, W, D) stack."""
    src = data.shape[1:]
    tgt = tuple(int(d) for d in target_dims)
    cx = _axis_coords(src[0], tgt[0])
    cy = _axis_coords(src[1], tgt[1])
    cz = _axis_coords(src[2], tgt[2])
    pos = np.empty((3, tgt[0] * tgt[1] * tgt[2]))
    pos[0] = np.repeat(cx, tgt[1] * tgt[2])
    pos[1] = np.tile(np.repeat(cy, tgt[2]), tgt[0])
    pos[2] = np.tile(cz, tgt[0] * tgt[1])
    s = Sampler(src, pos)
    return s.sample_channels(data).reshape(data.shape[0], *tgt)


def upsample_field(field: DisplacementField, target_dims) -> DisplacementField:
    """Resample a field onto a finer grid, rescaling values by the
    per-axis dims ratio so displacements stay in the target grid's
    voxel units (doubling dims doubles values)."""
    tgt = tuple(int(d) for d in target_dims)
    if len(tgt) != 3 or any(t < s for t, s in zip(tgt, field.dims)):
        raise ValueError(f"target dims {tgt} must be >= field dims {field.dims}")
    out = resample_channels(field.vectors, tgt)
    for a in range(3):
        out[a] *= tgt[a] / field.dims[a]
    return DisplacementField(out)


def _pool_axis(arr: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    starts = np.arange(0, n, 2)
    sums = np.add.reduceat(arr, starts, axis=axis)
    counts = np.minimum(starts + 2, n) - starts
    shape = [1] * arr.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


def downsample_volume(vol, factor: int = 2):
    """2x2x2 average pooling (odd trailing voxels pooled over the
    truncated window).  Field values are additionally halved to stay in
    the coarser grid's voxel units."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if any(d < 2 for d in vol.dims):
        raise ValueError(f"all dims must be >= 2 to downsample, got {vol.dims}")
    if isinstance(vol, Volume):
        d = vol.data
        for a in range(3):
            d = _pool_axis(d, a)
        return Volume(d, spacing=tuple(s * 2 for s in vol.spacing))
    if isinstance(vol, FeatureVolume):
        d = vol.data
        for a in range(1, 4):
            d = _pool_axis(d, a)
        return FeatureVolume(d)
    if isinstance(vol, DisplacementField):
        d = vol.vectors
        for a in range(1, 4):
            d = _pool_axis(d, a)
        return DisplacementField(d * 0.5)
    raise TypeError(f"cannot downsample {type(vol).__name__}")


class JacobianMap:
    """Jacobian determinant of phi = id + u at every voxel; the one-voxel
    boundary shell is fixed at exactly 1."""

    def __init__(self, det: np.ndarray):
        det = np.asarray(det, dtype=np.float64)
        if det.ndim != 3:
            raise ValueError("JacobianMap needs a 3D determinant grid")
        if not np.all(np.isfinite(det)):
            raise ValueError("non-finite Jacobian determinant")
        self.det = det
        self.det.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.det.shape

    def interior(self) -> np.ndarray:
        return self.det[1:-1, 1:-1, 1:-1]


def jacobian_map(field: DisplacementField, spacing=None) -> JacobianMap:
    """det(I + grad u) by central differences on interior voxels.

    Gradients are taken in voxel units; the determinant is invariant to
    per-axis spacing (similarity transform of the Jacobian), so
    ``spacing`` is accepted for interface symmetry but unused.
    """
    del spacing
    dims = field.dims
    if any(d < 3 for d in dims):
        raise ValueError(f"need dims >= 3 per axis, got {dims}")
    u = field.vectors
    # J[c, a] = d u_c / d x_a on the interior block
    J = np.empty((3, 3, dims[0] - 2, dims[1] - 2, dims[2] - 2))
    inner = (slice(1, -1), slice(1, -1), slice(1, -1))
    for c in range(3):
        J[c, 0] = (u[c, 2:, 1:-1, 1:-1] - u[c, :-2, 1:-1, 1:-1]) * 0.5
        J[c, 1] = (u[c, 1:-1, 2:, 1:-1] - u[c, 1:-1, :-2, 1:-1]) * 0.5
        J[c, 2] = (u[c, 1:-1, 1:-1, 2:] - u[c, 1:-1, 1:-1, :-2]) * 0.5
    for c in range(3):
        J[c, c] += 1.0
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    out = np.ones(dims)
    out[inner] = det
    return JacobianMap(out)
