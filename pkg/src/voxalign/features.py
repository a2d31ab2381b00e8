"""Encoder-agnostic feature machinery.

Covers the slice-wise geometric adaptation used to feed a 2D encoder
with volumetric data (pad to square -> upsample -> per-slice encode ->
stack -> upsample -> crop), a deterministic hand-crafted feature
extractor usable in place of any pretrained encoder, channel reduction,
and feature-pyramid construction.  External embeddings arrive as
channel-first FeatureVolume MVF files and plug in unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter
from scipy.stats import rankdata

from .fields import downsample_volume
from .tensors import FeatureVolume, Volume


@dataclass(frozen=True)
class AdaptationPlan:
    """Geometry needed to push slices through a square-input encoder and
    restore its features to the original grid."""

    orig_dims: tuple[int, int, int]
    padded: tuple[int, int]       # (H', W'), always square
    encoder_size: int             # k
    offsets: tuple[int, int]      # (pad_h, pad_w), centered

    def __post_init__(self):
        H, W, D = self.orig_dims
        hp, wp = self.padded
        if hp != wp or hp < H or wp < W:
            raise ValueError(f"padded dims must be square and >= original, got {self.padded}")
        if self.encoder_size < max(hp, wp):
            raise ValueError(f"encoder size {self.encoder_size} < padded side {hp}")
        if self.offsets != ((hp - H) // 2, (wp - W) // 2):
            raise ValueError(f"offsets {self.offsets} are not centered")
        if D < 1:
            raise ValueError("need at least one slice")


def plan_adaptation(dims, k: int) -> AdaptationPlan:
    """Plan the pad-to-square geometry for dims (H, W, D) and encoder size k."""
    H, W, D = (int(d) for d in dims)
    if min(H, W, D) < 1:
        raise ValueError(f"invalid dims {dims}")
    side = max(H, W)
    if k < side:
        raise ValueError(f"encoder size {k} smaller than max(H, W) = {side}")
    return AdaptationPlan(
        orig_dims=(H, W, D),
        padded=(side, side),
        encoder_size=int(k),
        offsets=((side - H) // 2, (side - W) // 2),
    )


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable align-corners bilinear resize of a 2D array."""
    h, w = img.shape

    def coords(src, tgt):
        if tgt == 1 or src == 1:
            return np.zeros(tgt, dtype=np.intp), np.zeros(tgt)
        c = np.arange(tgt, dtype=np.float64) * ((src - 1) / (tgt - 1))
        i0 = np.minimum(np.floor(c), src - 2).astype(np.intp)
        return i0, c - i0

    r0, rt = coords(h, out_h)
    c0, ct = coords(w, out_w)
    top = img[r0]
    bot = img[np.minimum(r0 + 1, h - 1)]
    rows = top * (1.0 - rt)[:, None] + bot * rt[:, None]
    left = rows[:, c0]
    right = rows[:, np.minimum(c0 + 1, w - 1)]
    return left * (1.0 - ct)[None, :] + right * ct[None, :]


def apply_adaptation(vol: Volume, plan: AdaptationPlan) -> np.ndarray:
    """Zero-pad each depth slice to the plan's square, then upsample to
    (k, k).  Returns a (D, k, k) array of encoder-ready slices."""
    if vol.dims != plan.orig_dims:
        raise ValueError(f"volume dims {vol.dims} do not match plan {plan.orig_dims}")
    H, W, D = plan.orig_dims
    side = plan.padded[0]
    oh, ow = plan.offsets
    k = plan.encoder_size
    out = np.empty((D, k, k))
    padded = np.zeros((side, side))
    for i in range(D):
        padded[:] = 0.0
        padded[oh:oh + H, ow:ow + W] = vol.data[:, :, i]
        out[i] = _resize_bilinear(padded, k, k)
    return out


def restore_features(slice_features, plan: AdaptationPlan) -> FeatureVolume:
    """Stack per-slice (C, g, g) encoder grids along depth, upsample
    spatially back to the padded square and crop off the padding."""
    grids = [np.asarray(g, dtype=np.float64) for g in slice_features]
    H, W, D = plan.orig_dims
    if len(grids) != D:
        raise ValueError(f"expected {D} slice grids, got {len(grids)}")
    shape = grids[0].shape
    if any(g.shape != shape for g in grids):
        raise ValueError("inconsistent slice feature shapes")
    if len(shape) != 3:
        raise ValueError(f"slice features must be (C, gh, gw), got {shape}")
    C, gh, gw = shape
    side = plan.padded[0]
    oh, ow = plan.offsets
    out = np.empty((C, H, W, D))
    for i, g in enumerate(grids):
        for c in range(C):
            up = _resize_bilinear(g[c], side, side)
            out[c, :, :, i] = up[oh:oh + H, ow:ow + W]
    return FeatureVolume(out)


def _znorm(channel: np.ndarray) -> np.ndarray:
    mu = channel.mean()
    sd = channel.std()
    if sd < 1e-12:
        return np.zeros_like(channel)
    return (channel - mu) / sd


def _photometric_normalize(v: np.ndarray, pre_sigma: float = 1.5,
                           post_sigma: float = 1.0) -> np.ndarray:
    """Denoise, map intensities through their empirical CDF (average
    ranks), then smooth again.  The rank transform makes the result
    invariant to strictly monotone contrast changes (gamma included);
    smoothing before it keeps voxel noise from scrambling the ranks of
    low-contrast regions, smoothing after it suppresses what remains."""
    sm = gaussian_filter(v, pre_sigma, mode="nearest")
    flat = sm.reshape(-1)
    ranks = rankdata(flat, method="average")
    cdf = (ranks - 0.5) / flat.size
    return gaussian_filter(cdf.reshape(v.shape), post_sigma, mode="nearest")


def _clamped_gradient(data: np.ndarray, axis: int) -> np.ndarray:
    # central difference with border replication: (v[i+1] - v[i-1]) / 2
    p = np.pad(data, [(1, 1) if a == axis else (0, 0) for a in range(3)], mode="edge")
    sl_hi = [slice(None)] * 3
    sl_lo = [slice(None)] * 3
    sl_hi[axis] = slice(2, None)
    sl_lo[axis] = slice(0, -2)
    return (p[tuple(sl_hi)] - p[tuple(sl_lo)]) * 0.5


def extract_fallback_features(vol: Volume) -> FeatureVolume:
    """Deterministic 8-channel structural embedding of an intensity
    volume: normalized intensity, per-axis gradients, gradient
    magnitude, 3x3x3 local mean and standard deviation, and the
    Laplacian.  Every channel is z-scored over the volume (flat
    channels become zeros).

    Intensities are photometrically normalized first (rank transform
    plus light smoothing), so the embedding is invariant to monotone
    contrast changes and tolerant of voxel noise; registration driven
    by these features survives appearance mismatch between the pair far
    better than raw values would.
    """
    v = _photometric_normalize(vol.data)
    gx = _clamped_gradient(v, 0)
    gy = _clamped_gradient(v, 1)
    gz = _clamped_gradient(v, 2)
    gmag = np.sqrt(gx * gx + gy * gy + gz * gz)
    lmean = uniform_filter(v, size=3, mode="nearest")
    lvar = uniform_filter(v * v, size=3, mode="nearest") - lmean * lmean
    # cancellation noise below 1e-12 would blow up through the sqrt
    lstd = np.sqrt(np.where(lvar > 1e-12, lvar, 0.0))
    pad = np.pad(v, 1, mode="edge")
    lap = (
        pad[2:, 1:-1, 1:-1] + pad[:-2, 1:-1, 1:-1]
        + pad[1:-1, 2:, 1:-1] + pad[1:-1, :-2, 1:-1]
        + pad[1:-1, 1:-1, 2:] + pad[1:-1, 1:-1, :-2]
        - 6.0 * v
    )
    chans = [v, gx, gy, gz, gmag, lmean, lstd, lap]
    return FeatureVolume(np.stack([_znorm(c) for c in chans]))


def reduce_channels(f: FeatureVolume, target: int) -> FeatureVolume:
    """Grouped mean over contiguous channel groups down to ``target``
    channels.  Groups have ceil(C/target) channels when C divides
    evenly; otherwise contiguous groups differing by at most one."""
    C = f.channels
    target = int(target)
    if target < 1 or target > C:
        raise ValueError(f"target channels {target} must be in [1, {C}]")
    if target == C:
        return f
    if C % target == 0:
        g = C // target
        out = f.data.reshape(target, g, *f.dims).mean(axis=1)
    else:
        bounds = [math.floor(i * C / target) for i in range(target + 1)]
        out = np.stack([f.data[a:b].mean(axis=0) for a, b in zip(bounds, bounds[1:])])
    return FeatureVolume(out)


@dataclass
class FeaturePyramid:
    """Multi-resolution feature stack, finest level first; level l has
    dims ceil(dims / 2**(l-1)) and all levels share the channel count."""

    levels: list[FeatureVolume]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        C = self.levels[0].channels
        if any(lv.channels != C for lv in self.levels):
            raise ValueError("channel count must be constant across levels")

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].channels


def build_pyramid(f: FeatureVolume, levels: int) -> FeaturePyramid:
    """Finest-first pyramid: level 1 is the input, each next level is a
    2x average-pool of the previous one."""
    n = int(levels)
    if n < 1:
        raise ValueError("need at least one level")
    if any(d < 2 ** (n - 1) for d in f.dims):
        raise ValueError(f"dims {f.dims} too small for {n} levels")
    out = [f]
    for _ in range(n - 1):
        out.append(downsample_volume(out[-1]))
    return FeaturePyramid(out)
