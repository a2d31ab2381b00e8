"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written against different primitives
than the package (scipy map_coordinates, explicit Python loops) so a
bug in the implementation cannot hide in its own oracle.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates


def smooth_velocity(dims, seed, sigma=5.0, amplitude=1.25):
    """Seeded smooth random velocity field, max vector norm = amplitude."""
    rng = np.random.default_rng(seed)
    v = np.stack([gaussian_filter(rng.standard_normal(dims), sigma, mode="nearest")
                  for _ in range(3)])
    peak = np.sqrt((v * v).sum(axis=0)).max()
    if peak > 0:
        v *= amplitude / peak
    return v


def euler_displacement(v: np.ndarray, nsteps: int, margin: int) -> tuple[np.ndarray, tuple]:
    """Flow of dx/dt = v(x) over t in [0,1] by explicit Euler steps,
    started at the interior voxels (margin shaved per side).

    Sampling uses scipy's clamped trilinear interpolation, independent
    of the package's sampler.  Returns (u, interior_shape).
    """
    dims = v.shape[1:]
    grids = np.meshgrid(*[np.arange(m, d - m, dtype=np.float64) for m, d in zip([margin] * 3, dims)],
                        indexing="ij")
    start = np.stack([g.reshape(-1) for g in grids])
    pos = start.copy()
    h = 1.0 / nsteps
    for _ in range(nsteps):
        vs = np.stack([map_coordinates(v[c], pos, order=1, mode="nearest") for c in range(3)])
        pos = pos + h * vs
    shape = tuple(d - 2 * margin for d in dims)
    return (pos - start).reshape(3, *shape), shape


def trilinear_reference(data: np.ndarray, pos) -> float:
    """Explicit 8-neighbor trilinear interpolation with border clamp."""
    dims = data.shape
    p = [min(max(float(pos[a]), 0.0), dims[a] - 1.0) for a in range(3)]
    i = [min(int(np.floor(p[a])), dims[a] - 2) if dims[a] > 1 else 0 for a in range(3)]
    t = [p[a] - i[a] if dims[a] > 1 else 0.0 for a in range(3)]
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((t[0] if dx else 1 - t[0])
                     * (t[1] if dy else 1 - t[1])
                     * (t[2] if dz else 1 - t[2]))
                ix = min(i[0] + dx, dims[0] - 1)
                iy = min(i[1] + dy, dims[1] - 1)
                iz = min(i[2] + dz, dims[2] - 1)
                total += w * data[ix, iy, iz]
    return total


def central_difference(f, x: np.ndarray, index, h: float = 1e-4) -> float:
    """(f(x+h e_i) - f(x-h e_i)) / 2h for a scalar function of an array."""
    xp = x.copy()
    xp[index] += h
    xm = x.copy()
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def surface_voxels_reference(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """Foreground voxels with a six-connected background neighbor; the
    grid border counts as background.  Plain Python loops."""
    H, W, D = mask.shape
    out = []
    for x in range(H):
        for y in range(W):
            for z in range(D):
                if not mask[x, y, z]:
                    continue
                on_surface = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    nx, ny, nz = x + dx, y + dy, z + dz
                    if not (0 <= nx < H and 0 <= ny < W and 0 <= nz < D) or not mask[nx, ny, nz]:
                        on_surface = True
                        break
                if on_surface:
                    out.append((x, y, z))
    return out


def percentile_reference(values, q: float) -> float:
    v = sorted(float(x) for x in values)
    h = (q / 100.0) * (len(v) - 1)
    lo = int(np.floor(h))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def hd95_bruteforce(mask_a: np.ndarray, mask_b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Exhaustive all-pairs symmetric 95% Hausdorff between two masks."""
    sa = surface_voxels_reference(mask_a)
    sb = surface_voxels_reference(mask_b)
    if not sa or not sb:
        raise ValueError("empty mask")
    sx, sy, sz = spacing

    def directed(src, dst):
        dst = np.asarray(dst, dtype=np.float64)
        dists = []
        for (ax, ay, az) in src:
            d2 = ((ax - dst[:, 0]) * sx) ** 2 + ((ay - dst[:, 1]) * sy) ** 2 \
                + ((az - dst[:, 2]) * sz) ** 2
            dists.append(np.sqrt(d2.min()))
        return dists

    return max(percentile_reference(directed(sa, sb), 95.0),
               percentile_reference(directed(sb, sa), 95.0))


def smoothness_reference(u: np.ndarray) -> float:
    """Volume mean of all squared forward differences, explicit loops."""
    _, H, W, D = u.shape
    total = 0.0
    for c in range(3):
        for x in range(H):
            for y in range(W):
                for z in range(D):
                    if x + 1 < H:
                        total += (u[c, x + 1, y, z] - u[c, x, y, z]) ** 2
                    if y + 1 < W:
                        total += (u[c, x, y + 1, z] - u[c, x, y, z]) ** 2
                    if z + 1 < D:
                        total += (u[c, x, y, z + 1] - u[c, x, y, z]) ** 2
    return total / (H * W * D)
