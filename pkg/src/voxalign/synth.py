"""Synthetic phantom pairs with known ground-truth deformations, plus
the contrast/noise perturbations used for robustness studies.

A case consists of a textured moving volume with labels, a ground-truth
field g, the fixed pair (fixed = warp(moving, g), fixed labels =
nearest-neighbor warp of the moving labels) and a perturbed copy of the
moving volume (gamma contrast change and additive Gaussian noise).
Everything is seeded and reproducible byte-for-byte.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import DisplacementField, integrate_velocity, warp, warp_labels
from .tensors import LabelVolume, Volume

PHANTOM_KINDS = ("spheres", "slabs", "cardiac-like")
DEFORM_KINDS = ("none", "translate", "svf")


def _smooth_noise(dims, rng: np.random.Generator, sigma: float) -> np.ndarray:
    raw = rng.standard_normal(dims)
    sm = gaussian_filter(raw, sigma, mode="nearest")
    sd = sm.std()
    return sm / sd if sd > 0 else sm


def _coords(dims):
    return np.indices(dims, dtype=np.float64)


def _soft_ball(coords, center, radius, edge=1.5) -> np.ndarray:
    d = np.sqrt(((coords - np.reshape(center, (3, 1, 1, 1))) ** 2).sum(axis=0))
    return 1.0 / (1.0 + np.exp((d - radius) / edge))


def _spheres(dims, rng):
    coords = _coords(dims)
    img = 0.15 + 0.1 * _smooth_noise(dims, rng, max(2.0, min(dims) / 10.0))
    labels = np.zeros(dims, dtype=np.int32)
    span = min(dims)
    n_spheres = 3
    centers = []
    radii = []
    tries = 0
    while len(centers) < n_spheres and tries < 200:
        tries += 1
        r = span * rng.uniform(0.12, 0.18)
        c = np.array([rng.uniform(0.25, 0.75) * (d - 1) for d in dims])
        if any(np.linalg.norm(c - p) < r + pr + 3.0 for p, pr in zip(centers, radii)):
            continue
        centers.append(c)
        radii.append(r)
    for i, (c, r) in enumerate(zip(centers, radii)):
        ball = _soft_ball(coords, c, r)
        intensity = 0.55 + 0.15 * i
        img = img * (1.0 - ball) + intensity * ball
        d = np.sqrt(((coords - c.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
        labels[d <= r] = i + 1
    # gentle everywhere-texture so local NCC has signal inside structures
    img = img * (1.0 + 0.15 * _smooth_noise(dims, rng, 1.5))
    return img, labels


def _slabs(dims, rng):
    H = dims[0]
    x = _coords(dims)[0]
    b1, b2 = H * 0.35, H * 0.65
    edge = max(1.0, H / 24.0)
    s1 = 1.0 / (1.0 + np.exp((x - b1) / edge))
    s2 = 1.0 / (1.0 + np.exp((x - b2) / edge))
    img = 0.2 * s1 + 0.6 * (s2 - s1) + 0.9 * (1.0 - s2)
    img = img * (1.0 + 0.15 * _smooth_noise(dims, rng, 1.5))
    labels = np.zeros(dims, dtype=np.int32)
    labels[(x > b1) & (x <= b2)] = 1
    labels[x > b2] = 2
    return img, labels


def _cardiac_like(dims, rng):
    coords = _coords(dims)
    center = np.array([(d - 1) / 2.0 for d in dims])
    span = min(dims)
    r_inner = span * 0.14
    r_outer = span * 0.24
    d = np.sqrt(((coords - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    shell = _soft_ball(coords, center, r_outer) - _soft_ball(coords, center, r_inner)
    pool = _soft_ball(coords, center, r_inner)
    img = 0.15 + 0.1 * _smooth_noise(dims, rng, max(2.0, span / 10.0))
    img = img * (1.0 - shell - pool) + 0.85 * shell + 0.45 * pool
    img = img * (1.0 + 0.15 * _smooth_noise(dims, rng, 1.5))
    labels = np.zeros(dims, dtype=np.int32)
    labels[d <= r_inner] = 2
    labels[(d > r_inner) & (d <= r_outer)] = 1
    return img, labels


def make_phantom(kind: str, dims, seed: int = 0, spacing=(1.0, 1.0, 1.0)):
    """Build a textured phantom Volume and its LabelVolume."""
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    if kind == "spheres":
        img, labels = _spheres(dims, rng)
    elif kind == "slabs":
        img, labels = _slabs(dims, rng)
    elif kind == "cardiac-like":
        img, labels = _cardiac_like(dims, rng)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; options: {PHANTOM_KINDS}")
    img = np.clip(img, 0.0, 1.2)
    return Volume(img, spacing=spacing), LabelVolume(labels)


def make_deformation(kind: str, dims, seed: int = 0, magnitude: float | None = None) -> DisplacementField:
    """Ground-truth deformation: zero, constant translation, or the
    integrated flow of a smooth random stationary velocity field."""
    dims = tuple(int(d) for d in dims)
    if kind == "none":
        return DisplacementField.zeros(dims)
    if kind == "translate":
        mag = 2.0 if magnitude is None else float(magnitude)
        vec = np.zeros((3, *dims))
        vec[0] = mag
        vec[1] = mag * 0.5
        vec[2] = mag * 0.25
        return DisplacementField(vec)
    if kind == "svf":
        mag = (0.05 * min(dims)) if magnitude is None else float(magnitude)
        rng = np.random.default_rng(seed + 1)
        sigma = max(2.0, min(dims) / 8.0)
        v = np.stack([_smooth_noise(dims, rng, sigma) for _ in range(3)])
        norms = np.sqrt((v * v).sum(axis=0))
        peak = norms.max()
        if peak > 0:
            v *= mag / peak
        return integrate_velocity(DisplacementField(v), squaring_steps=7)
    raise ValueError(f"unknown deform kind {kind!r}; options: {DEFORM_KINDS}")


def gamma_correct(vol: Volume, gamma: float) -> Volume:
    """Contrast perturbation v -> v**gamma on min-max normalized
    intensities; gamma = 1 returns the input unchanged."""
    g = float(gamma)
    if g <= 0:
        raise ValueError("gamma must be positive")
    if g == 1.0:
        return vol
    v = vol.data
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return vol
    norm = (v - lo) / (hi - lo)
    return Volume(norm ** g, spacing=vol.spacing)


def add_noise(vol: Volume, sigma: float, rng: np.random.Generator) -> Volume:
    """Additive Gaussian noise; sigma = 0 returns the input unchanged."""
    s = float(sigma)
    if s < 0:
        raise ValueError("noise sigma must be non-negative")
    if s == 0.0:
        return vol
    return Volume(vol.data + s * rng.standard_normal(vol.dims), spacing=vol.spacing)


def generate_case(kind: str, dims, deform: str, gamma: float = 1.0,
                  noise_sigma: float = 0.0, seed: int = 0, spacing=(1.0, 1.0, 1.0),
                  magnitude: float | None = None):
    """Full synthetic case as a dict of tensors.

    Keys: moving, labels_moving, fixed, labels_fixed, g_true,
    moving_perturbed (gamma then noise applied to the moving image).
    """
    moving, labels_moving = make_phantom(kind, dims, seed=seed, spacing=spacing)
    g_true = make_deformation(deform, dims, seed=seed, magnitude=magnitude)
    fixed = warp(moving, g_true)
    labels_fixed = warp_labels(labels_moving, g_true)
    rng = np.random.default_rng(seed + 1000)
    perturbed = add_noise(gamma_correct(moving, gamma), noise_sigma, rng)
    return {
        "moving": moving,
        "labels_moving": labels_moving,
        "fixed": fixed,
        "labels_fixed": labels_fixed,
        "g_true": g_true,
        "moving_perturbed": perturbed,
    }
