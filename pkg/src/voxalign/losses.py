"""Similarity and regularity losses with analytic gradients.

Conventions:

- ``ncc_loss`` is 1 minus the volume mean of squared local NCC in
  odd-sized cubic windows with border replication; its gradient is with
  respect to the warped intensities.
- ``hfc_loss`` is the multi-scale feature-consistency loss: per scale,
  the mean squared difference (over voxels and channels) between warped
  moving features and fixed features, weighted 1/2^(l-1), summed over
  scales; gradients are with respect to each scale's displacement.
- ``soft_dice_loss`` works on soft per-label probability channels so
  trilinear warping stays differentiable; gradient is w.r.t. the probs.
- ``smoothness_loss`` is the diffusion regularizer: the volume mean of
  all squared forward differences of the displacement components
  (the constant identity part of phi drops out of the penalty).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import uniform_filter

from .features import FeaturePyramid
from .fields import DisplacementField, Sampler, warp_positions
from .tensors import FeatureVolume, LabelVolume, Volume

_VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class LossWeights:
    """Balance factors for the loss terms; all default to 1."""

    lambda_ncc: float = 1.0
    lambda_hfc: float = 1.0
    lambda_dice: float = 1.0
    lambda_smooth: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_ncc, self.lambda_hfc, self.lambda_dice, self.lambda_smooth)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if self.lambda_ncc == 0 and self.lambda_hfc == 0 and self.lambda_dice == 0:
            raise ValueError("at least one similarity weight must be positive")


@dataclass
class LossReport:
    """Weighted loss breakdown; ``dice`` is None in unsupervised mode."""

    total: float
    ncc: float
    hfc: float
    dice: float | None
    smooth: float
    hfc_levels: tuple[float, ...] = dc_field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "ncc": self.ncc,
            "hfc": self.hfc,
            "dice": self.dice,
            "smooth": self.smooth,
            "hfc_levels": list(self.hfc_levels),
        }


def _fold_edge_pad(arr: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of np.pad(..., mode='edge'): every padded slot adds into
    the border voxel it replicates."""
    for axis in range(3):
        arr = np.moveaxis(arr, axis, 0)
        head = arr[:r].sum(axis=0)
        tail = arr[arr.shape[0] - r:].sum(axis=0)
        arr = arr[r:arr.shape[0] - r].copy()
        arr[0] += head
        arr[-1] += tail
        arr = np.moveaxis(arr, 0, axis)
    return arr


def _box_scatter(coeff: np.ndarray, window: int, r: int) -> np.ndarray:
    """Sum of ``coeff`` over all window centers covering each padded
    slot (zero-filled box correlation on the padded grid)."""
    emb = np.zeros(tuple(s + 2 * r for s in coeff.shape))
    emb[r:-r, r:-r, r:-r] = coeff
    return uniform_filter(emb, size=window, mode="constant", cval=0.0) * float(window ** 3)


def ncc_loss(warped: Volume, fixed: Volume, window: int = 9):
    """Windowed squared-NCC dissimilarity and its gradient w.r.t. the
    warped intensities.

    Windows whose intensity variance (either side) falls below 1e-10
    contribute NCC = 0, so constant regions neither attract nor repel.
    """
    if warped.dims != fixed.dims:
        raise ValueError(f"dims mismatch: {warped.dims} vs {fixed.dims}")
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    I = warped.data
    J = fixed.data
    r = window // 2
    N = float(window ** 3)
    M = float(I.size)

    Ip = np.pad(I, r, mode="edge")
    Jp = np.pad(J, r, mode="edge")
    crop = (slice(r, -r),) * 3

    def wmean(a):
        return uniform_filter(a, size=window, mode="constant", cval=0.0)[crop]

    EI = wmean(Ip)
    EJ = wmean(Jp)
    cov = wmean(Ip * Jp) - EI * EJ
    varI = wmean(Ip * Ip) - EI * EI
    varJ = wmean(Jp * Jp) - EJ * EJ

    ok = (varI > _VAR_FLOOR) & (varJ > _VAR_FLOOR)
    denom = np.where(ok, varI * varJ, 1.0)
    ncc2 = np.where(ok, cov * cov / denom, 0.0)
    loss = 1.0 - float(ncc2.sum()) / M

    # d(ncc2)/d(I at window slot s) = A (J_s - EJ) - AB (I_s - EI)
    A = np.where(ok, 2.0 * cov / (N * denom), 0.0)
    AB = np.where(ok, A * cov / np.where(ok, varI, 1.0), 0.0)
    t_a = _box_scatter(A, window, r)
    t_aej = _box_scatter(A * EJ, window, r)
    t_ab = _box_scatter(AB, window, r)
    t_abei = _box_scatter(AB * EI, window, r)
    grad_pad = Jp * t_a - t_aej - Ip * t_ab + t_abei
    grad = _fold_edge_pad(grad_pad, r) * (-1.0 / M)
    return loss, grad


def hfc_loss(moving_pyr: FeaturePyramid, fixed_pyr: FeaturePyramid, fields_per_level):
    """Multi-scale feature-consistency loss.

    Per scale l (1-based, finest first): warp the moving features by
    that scale's field, take the mean squared difference to the fixed
    features over voxels and channels, and weight by 1/2^(l-1).

    Returns (total, per_level_grads, per_level_values); each gradient is
    d(total)/d(u^l), shape (3, H_l, W_l, D_l).
    """
    if moving_pyr.depth != fixed_pyr.depth:
        raise ValueError("pyramids must have equal level counts")
    if moving_pyr.channels != fixed_pyr.channels:
        raise ValueError("pyramids must have equal channel counts")
    fields = list(fields_per_level)
    if len(fields) != moving_pyr.depth:
        raise ValueError(f"expected {moving_pyr.depth} fields, got {len(fields)}")
    total = 0.0
    grads = []
    values = []
    for l, (mov, fix, fld) in enumerate(zip(moving_pyr.levels, fixed_pyr.levels, fields), start=1):
        if mov.dims != fix.dims:
            raise ValueError(f"level {l} dims mismatch: {mov.dims} vs {fix.dims}")
        if fld.dims != mov.dims:
            raise ValueError(f"level {l} field dims {fld.dims} do not match {mov.dims}")
        weight = 1.0 / 2 ** (l - 1)
        C = mov.channels
        n = mov.data[0].size
        s = Sampler(mov.dims, warp_positions(fld.vectors))
        warped, sgrad = s.sample_channels(mov.data, need_grad=True)  # (C,n), (C,3,n)
        diff = warped - fix.data.reshape(C, n)
        value = float((diff * diff).sum()) / (C * n)
        scale = weight * 2.0 / (C * n)
        g = scale * np.einsum("cn,can->an", diff, sgrad)
        total += weight * value
        values.append(value)
        grads.append(g.reshape(3, *mov.dims))
    return total, grads, values


def soft_dice_loss(warped_probs: FeatureVolume, fixed_labels: LabelVolume, labels=None, eps: float = 1e-5):
    """Soft Dice dissimilarity between per-label probability channels
    and one-hot targets from ``fixed_labels``.

    ``labels`` defaults to the foreground labels of the fixed grid, in
    sorted order, one probability channel each.  Returns the loss and
    its gradient w.r.t. the probabilities.
    """
    if labels is None:
        labels = fixed_labels.foreground_labels
    labels = tuple(int(v) for v in labels)
    if not labels:
        raise ValueError("no foreground labels to score")
    if warped_probs.channels != len(labels):
        raise ValueError(
            f"channel count {warped_probs.channels} != foreground label count {len(labels)}"
        )
    if warped_probs.dims != fixed_labels.dims:
        raise ValueError(f"dims mismatch: {warped_probs.dims} vs {fixed_labels.dims}")
    L = len(labels)
    loss_sum = 0.0
    grad = np.empty_like(warped_probs.data)
    for ch, lab in enumerate(labels):
        p = warped_probs.data[ch]
        g = (fixed_labels.labels == lab).astype(np.float64)
        num = 2.0 * float((p * g).sum()) + eps
        den = float(p.sum()) + float(g.sum()) + eps
        loss_sum += num / den
        grad[ch] = -(2.0 * g * den - num) / (den * den) / L
    return 1.0 - loss_sum / L, grad


def smoothness_loss(u: DisplacementField):
    """Diffusion regularizer: volume mean of all squared forward
    differences of the displacement components, with gradient."""
    vec = u.vectors
    M = float(vec[0].size)
    loss = 0.0
    grad = np.zeros_like(vec)
    for axis in range(1, 4):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        d = vec[tuple(hi)] - vec[tuple(lo)]
        loss += float((d * d).sum())
        grad[tuple(hi)] += 2.0 * d
        grad[tuple(lo)] -= 2.0 * d
    return loss / M, grad / M


def total_loss(ncc: float, hfc: float, smooth: float, weights: LossWeights,
               dice: float | None = None, hfc_levels=()) -> LossReport:
    """Weighted sum of the component losses; the Dice term is skipped
    (treated as absent, not zero-valued) when no labels are supplied."""
    total = (
        weights.lambda_ncc * ncc
        + weights.lambda_hfc * hfc
        + weights.lambda_smooth * smooth
    )
    if dice is not None:
        total += weights.lambda_dice * dice
    return LossReport(
        total=total, ncc=ncc, hfc=hfc, dice=dice, smooth=smooth,
        hfc_levels=tuple(hfc_levels),
    )
