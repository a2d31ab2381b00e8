"""Evaluation metrics: per-label Dice, 95th-percentile symmetric surface
distance in physical units, and the spread of log Jacobian determinants.

HD95 uses surface voxels (foreground voxels with at least one
six-connected background neighbor, the volume border counting as
background), directed nearest-surface distances both ways, and the max
of the two directed 95th percentiles with linearly interpolated order
statistics.  SDlogJ is the population standard deviation of
log(det J) over interior voxels with positive determinant; non-positive
determinants are excluded and reported as the folding fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import DisplacementField, jacobian_map
from .tensors import LabelVolume


def dice_score(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Overlap 100 * 2|A n B| / (|A| + |B|); 100 when both masks are
    empty, 0 when exactly one is."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    label = int(label)
    if label not in a.label_set and label not in b.label_set:
        raise ValueError(f"label {label} absent from both grids")
    ma = a.labels == label
    mb = b.labels == label
    na = int(ma.sum())
    nb = int(mb.sum())
    if na == 0 and nb == 0:
        return 100.0
    if na == 0 or nb == 0:
        return 0.0
    return 100.0 * 2.0 * int((ma & mb).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (K, 3) of foreground voxels with a six-connected
    background neighbor; the volume border counts as background."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    inner = padded[1:-1, 1:-1, 1:-1]
    has_bg = (
        ~padded[:-2, 1:-1, 1:-1] | ~padded[2:, 1:-1, 1:-1]
        | ~padded[1:-1, :-2, 1:-1] | ~padded[1:-1, 2:, 1:-1]
        | ~padded[1:-1, 1:-1, :-2] | ~padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(inner & has_bg)


def _nearest_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Min spacing-scaled Euclidean distance from each src voxel to the
    dst voxel set, chunked to bound memory."""
    sx, sy, sz = (float(s) for s in spacing)
    a = src.astype(np.float64)
    b = dst.astype(np.float64)
    out = np.empty(len(a))
    chunk = max(1, int(4_000_000 // max(len(b), 1)))
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        d2 = (
            ((blk[:, None, 0] - b[None, :, 0]) * sx) ** 2
            + ((blk[:, None, 1] - b[None, :, 1]) * sy) ** 2
            + ((blk[:, None, 2] - b[None, :, 2]) * sz) ** 2
        )
        out[start:start + chunk] = d2.min(axis=1)
    return np.sqrt(out)


def percentile_linear(values: np.ndarray, q: float) -> float:
    """q-th percentile with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of empty set")
    h = (q / 100.0) * (v.size - 1)
    lo = int(np.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def hd95(a: LabelVolume, b: LabelVolume, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric 95% Hausdorff distance between two masks, millimeters."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    label = int(label)
    ma = a.labels == label
    mb = b.labels == label
    if not ma.any() or not mb.any():
        raise ValueError(f"label {label} empty in one of the grids")
    sa = surface_voxels(ma)
    sb = surface_voxels(mb)
    d_ab = _nearest_distances(sa, sb, spacing)
    d_ba = _nearest_distances(sb, sa, spacing)
    return max(percentile_linear(d_ab, 95.0), percentile_linear(d_ba, 95.0))


def sdlogj_from_map(jmap) -> float:
    """Population std of log det over interior voxels with det > 0."""
    det = jmap.interior()
    pos = det[det > 0.0]
    if pos.size == 0:
        raise ValueError("all interior voxels folded")
    return float(np.std(np.log(pos)))


def folding_from_map(jmap) -> float:
    det = jmap.interior()
    return float((det <= 0.0).sum()) / det.size


def sdlogj(field: DisplacementField, spacing=None) -> float:
    return sdlogj_from_map(jacobian_map(field, spacing))


def folding_fraction(field: DisplacementField, spacing=None) -> float:
    """Share of interior voxels where the map locally inverts (det <= 0)."""
    return folding_from_map(jacobian_map(field, spacing))


@dataclass
class MetricsReport:
    case: str
    per_label_dice: dict[int, float] = dc_field(default_factory=dict)
    per_label_hd95: dict[int, float | None] = dc_field(default_factory=dict)
    mean_dice: float | None = None
    mean_hd95: float | None = None
    sdlogj: float | None = None
    folding: float | None = None

    def as_dict(self) -> dict:
        return {
            "case": self.case,
            "mean_dice": self.mean_dice,
            "mean_hd95": self.mean_hd95,
            "sdlogj": self.sdlogj,
            "folding": self.folding,
            "per_label_dice": {str(k): v for k, v in self.per_label_dice.items()},
            "per_label_hd95": {str(k): v for k, v in self.per_label_hd95.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def to_csv(self) -> str:
        labels = sorted(self.per_label_dice)
        cols = ["case", "mean_dice", "mean_hd95", "sdlogj", "folding"]
        cols += [f"dice_{l}" for l in labels] + [f"hd95_{l}" for l in labels]
        fmt = lambda v: "" if v is None else repr(float(v))
        row = [self.case, fmt(self.mean_dice), fmt(self.mean_hd95),
               fmt(self.sdlogj), fmt(self.folding)]
        row += [fmt(self.per_label_dice[l]) for l in labels]
        row += [fmt(self.per_label_hd95.get(l)) for l in labels]
        return ",".join(cols) + "\n" + ",".join(row) + "\n"


def evaluate_labels(warped: LabelVolume, fixed: LabelVolume, spacing=(1.0, 1.0, 1.0),
                    field: DisplacementField | None = None, case: str = "case") -> MetricsReport:
    """Score a warped segmentation against the fixed one over the labels
    present in the fixed grid.  HD95 of a label that is empty on either
    side is reported as missing (None), never as 0."""
    report = MetricsReport(case=case)
    labels = fixed.foreground_labels
    if not labels:
        raise ValueError("fixed grid has no foreground labels")
    for lab in labels:
        report.per_label_dice[lab] = dice_score(warped, fixed, lab)
        try:
            report.per_label_hd95[lab] = hd95(warped, fixed, lab, spacing)
        except ValueError:
            report.per_label_hd95[lab] = None
    report.mean_dice = float(np.mean(list(report.per_label_dice.values())))
    defined = [v for v in report.per_label_hd95.values() if v is not None]
    report.mean_hd95 = float(np.mean(defined)) if defined else None
    if field is not None:
        jmap = jacobian_map(field, spacing)
        report.sdlogj = sdlogj_from_map(jmap)
        report.folding = folding_from_map(jmap)
    return report
