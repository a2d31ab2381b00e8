"""Coarse-to-fine registration driver.

Optimizes a stationary velocity field per pyramid level by projected
gradient descent with step clipping and plateau-halved step sizes.  The
coarse solution enters each finer level only through field composition;
the residual velocity always restarts at zero.  Loss at level l uses
NCC on that level's image pair, the feature-consistency loss over the
scales l..n that exist at that resolution, optional soft Dice at full
resolution, and the diffusion regularizer on the level's total field.

Gradients of every component are exact with respect to the displacement
they touch; the map from velocity updates onto the integrated
displacement uses the small-deformation approximation (identity), which
the step-control loop tolerates since only descent matters.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .features import FeaturePyramid, build_pyramid, extract_fallback_features
from .fields import (
    DisplacementField,
    Sampler,
    base_grid,
    downsample_volume,
    upsample_field,
    warp,
    warp_labels,
)
from .losses import LossReport, LossWeights, hfc_loss, ncc_loss, smoothness_loss, soft_dice_loss, total_loss
from .tensors import FeatureVolume, LabelVolume, Volume

PLATEAU_PATIENCE = 5
CONVERGENCE_WINDOW = 10

_DEFAULT_ITERS = (200, 150, 100, 60)  # coarse -> fine


class NonFiniteLossError(RuntimeError):
    """Objective became non-finite; the run aborted."""


def default_iterations(levels: int) -> tuple[int, ...]:
    if levels <= len(_DEFAULT_ITERS):
        return _DEFAULT_ITERS[len(_DEFAULT_ITERS) - levels:]
    return (_DEFAULT_ITERS[0],) * (levels - len(_DEFAULT_ITERS)) + _DEFAULT_ITERS


@dataclass
class SolverConfig:
    levels: int = 4
    iterations: tuple[int, ...] | None = None  # coarse -> fine, len == levels
    step_size: float = 0.5          # max per-voxel update, level voxel units
    step_clip: float = 0.4          # hard per-voxel cap per iteration
    squaring_steps: int = 7
    ncc_window: int = 9
    weights: LossWeights = dc_field(default_factory=LossWeights)
    convergence_tol: float = 1e-5   # relative loss change over 10 iterations

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations is None:
            self.iterations = default_iterations(self.levels)
        self.iterations = tuple(int(i) for i in self.iterations)
        if len(self.iterations) != self.levels:
            raise ValueError(
                f"iterations list length {len(self.iterations)} != levels {self.levels}"
            )
        if any(i < 1 for i in self.iterations):
            raise ValueError("iteration counts must be positive")
        if self.step_size <= 0 or self.step_clip <= 0:
            raise ValueError("step sizes must be positive")
        if self.squaring_steps < 1:
            raise ValueError("squaring_steps must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "SolverConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class RegistrationResult:
    """Final full-resolution field plus per-level diagnostics (levels
    listed in execution order, coarsest first)."""

    field: DisplacementField
    initial_report: LossReport
    final_report: LossReport
    trajectories: list[list[float]]
    iterations_run: list[int]
    seconds: list[float]


def _pool_counts(n: int) -> np.ndarray:
    c = np.full((n + 1) // 2, 2, dtype=np.float64)
    if n % 2 == 1:
        c[-1] = 1.0
    return c


def _downsample_field_array(u: np.ndarray) -> np.ndarray:
    """2x average pooling of (3,H,W,D) with value halving."""
    out = u
    for axis in range(1, 4):
        n = out.shape[axis]
        starts = np.arange(0, n, 2)
        sums = np.add.reduceat(out, starts, axis=axis)
        shape = [1] * 4
        shape[axis] = len(starts)
        out = sums / _pool_counts(n).reshape(shape)
    return out * 0.5


def _downsample_adjoint(g: np.ndarray, fine_dims) -> np.ndarray:
    """Adjoint of _downsample_field_array: distribute each coarse
    gradient back over its pooling window."""
    out = g * 0.5
    for axis, n in zip(range(1, 4), fine_dims):
        shape = [1] * 4
        shape[axis] = out.shape[axis]
        out = out / _pool_counts(n).reshape(shape)
        idx = [slice(None)] * 4
        idx[axis] = slice(0, n)
        out = np.repeat(out, 2, axis=axis)[tuple(idx)]
    return out


def _integrate_array(v: np.ndarray, steps: int) -> np.ndarray:
    dims = v.shape[1:]
    u = v / float(2 ** steps)
    for _ in range(steps):
        s = Sampler(dims, base_grid(dims) + u.reshape(3, -1))
        u = u + s.sample_channels(u).reshape(3, *dims)
    return u


class _LevelProblem:
    """Objective for one pyramid level with a frozen coarse field."""

    def __init__(self, level: int, cfg: SolverConfig, mov_img: Volume, fix_img: Volume,
                 mov_feats: FeaturePyramid, fix_feats: FeaturePyramid, scale_dims: list,
                 u_coarse: np.ndarray, onehot: np.ndarray | None,
                 fixed_labels: LabelVolume | None):
        self.level = level
        self.cfg = cfg
        self.dims = mov_img.dims
        self.mov_img = mov_img
        self.fix_img = fix_img
        self.mov_feats = mov_feats      # sub-pyramid, leading level == this level
        self.fix_feats = fix_feats
        self.scale_dims = scale_dims    # dims of each sub-pyramid scale
        self.u_coarse = u_coarse
        self.onehot = onehot            # (L, H, W, D) at full res or None
        self.fixed_labels = fixed_labels
        self.base = base_grid(self.dims)

    def evaluate(self, dv: np.ndarray, need_grad: bool):
        cfg = self.cfg
        w = cfg.weights
        u_res = _integrate_array(dv, cfg.squaring_steps)
        s_res = Sampler(self.dims, self.base + u_res.reshape(3, -1))
        u_tot = u_res + s_res.sample_channels(self.u_coarse).reshape(3, *self.dims)

        sampler = Sampler(self.dims, self.base + u_tot.reshape(3, -1))
        grad = np.zeros_like(dv) if need_grad else None

        # image similarity at this level
        if need_grad:
            warped_arr, img_g = sampler.sample(self.mov_img.data.reshape(-1), need_grad=True)
        else:
            warped_arr = sampler.sample(self.mov_img.data.reshape(-1))
        ncc_val, ncc_g = ncc_loss(
            Volume(warped_arr.reshape(self.dims), spacing=self.mov_img.spacing),
            self.fix_img, cfg.ncc_window,
        )
        if need_grad:
            grad += w.lambda_ncc * (ncc_g.reshape(1, -1) * img_g).reshape(3, *self.dims)

        # feature consistency over the scales available at this level
        fields = [DisplacementField(u_tot)]
        cur = u_tot
        for _ in range(len(self.scale_dims) - 1):
            cur = _downsample_field_array(cur)
            fields.append(DisplacementField(cur))
        hfc_val, hfc_grads, hfc_values = hfc_loss(self.mov_feats, self.fix_feats, fields)
        if need_grad:
            acc = hfc_grads[-1]
            for j in range(len(hfc_grads) - 2, -1, -1):
                acc = _downsample_adjoint(acc, self.scale_dims[j]) + hfc_grads[j]
            grad += w.lambda_hfc * acc

        # optional soft Dice, full resolution only
        dice_val = None
        if self.onehot is not None and w.lambda_dice > 0:
            if need_grad:
                probs, probs_g = sampler.sample_channels(self.onehot, need_grad=True)
            else:
                probs = sampler.sample_channels(self.onehot)
            probs = np.clip(probs, 0.0, 1.0)
            dice_val, dice_g = soft_dice_loss(
                FeatureVolume(probs.reshape(-1, *self.dims)), self.fixed_labels
            )
            if need_grad:
                dg = np.einsum("cn,can->an", dice_g.reshape(probs.shape), probs_g)
                grad += w.lambda_dice * dg.reshape(3, *self.dims)

        smooth_val, smooth_g = smoothness_loss(DisplacementField(u_tot))
        if need_grad:
            grad += w.lambda_smooth * smooth_g

        report = total_loss(ncc_val, hfc_val, smooth_val, w, dice=dice_val,
                            hfc_levels=hfc_values)
        if not np.isfinite(report.total):
            raise NonFiniteLossError(
                f"non-finite loss at level {self.level}: {report.as_dict()}"
            )
        return report, grad, u_tot


def _optimize_level(problem: _LevelProblem, iterations: int, cfg: SolverConfig):
    report, grad, u_tot = problem.evaluate(np.zeros((3, *problem.dims)), True)
    dv = np.zeros((3, *problem.dims))
    loss_cur = report.total
    traj = [loss_cur]
    eta = cfg.step_size
    fails = 0
    executed = 0
    for _ in range(iterations):
        executed += 1
        gmax = float(np.sqrt((grad * grad).sum(axis=0)).max())
        if gmax < 1e-30:
            break
        step = grad * (-eta / gmax)
        norms = np.sqrt((step * step).sum(axis=0))
        np.clip(norms, cfg.step_clip, None, out=norms)
        step *= cfg.step_clip / norms
        prop = dv + step
        rep_p, grad_p, u_tot_p = problem.evaluate(prop, True)
        if rep_p.total < loss_cur:
            dv, loss_cur, report, grad, u_tot = prop, rep_p.total, rep_p, grad_p, u_tot_p
            fails = 0
        else:
            fails += 1
            if fails >= PLATEAU_PATIENCE:
                eta *= 0.5
                fails = 0
        traj.append(loss_cur)
        if len(traj) > CONVERGENCE_WINDOW:
            past = traj[-(CONVERGENCE_WINDOW + 1)]
            if past - traj[-1] < cfg.convergence_tol * max(abs(past), 1e-12):
                break
    return dv, u_tot, report, traj, executed


def register(moving: Volume, fixed: Volume, moving_feats: FeatureVolume | None = None,
             fixed_feats: FeatureVolume | None = None,
             moving_labels: LabelVolume | None = None,
             fixed_labels: LabelVolume | None = None,
             cfg: SolverConfig | None = None) -> RegistrationResult:
    """Align ``moving`` to ``fixed``; returns the full-resolution field
    and per-level diagnostics.  Features default to the built-in
    fallback extractor when not supplied."""
    cfg = cfg or SolverConfig()
    if moving.dims != fixed.dims:
        raise ValueError(f"dims mismatch: moving {moving.dims} vs fixed {fixed.dims}")
    if moving_feats is None:
        moving_feats = extract_fallback_features(moving)
    if fixed_feats is None:
        fixed_feats = extract_fallback_features(fixed)
    for name, feats in (("moving", moving_feats), ("fixed", fixed_feats)):
        if feats.dims != moving.dims:
            raise ValueError(f"{name} feature dims {feats.dims} != image dims {moving.dims}")
    if moving_feats.channels != fixed_feats.channels:
        raise ValueError("feature channel counts differ")
    use_dice = (
        moving_labels is not None and fixed_labels is not None
        and cfg.weights.lambda_dice > 0 and len(fixed_labels.foreground_labels) > 0
    )
    if moving_labels is not None and moving_labels.dims != moving.dims:
        raise ValueError("moving label dims mismatch")
    if fixed_labels is not None and fixed_labels.dims != moving.dims:
        raise ValueError("fixed label dims mismatch")

    n = cfg.levels
    mov_imgs = [moving]
    fix_imgs = [fixed]
    for _ in range(n - 1):
        mov_imgs.append(downsample_volume(mov_imgs[-1]))
        fix_imgs.append(downsample_volume(fix_imgs[-1]))
    mov_pyr = build_pyramid(moving_feats, n)
    fix_pyr = build_pyramid(fixed_feats, n)
    onehot = None
    if use_dice:
        labs = fixed_labels.foreground_labels
        onehot = np.stack([(moving_labels.labels == lab).astype(np.float64) for lab in labs])

    def make_problem(level: int, u_coarse: np.ndarray) -> _LevelProblem:
        i = level - 1
        sub_m = FeaturePyramid(mov_pyr.levels[i:])
        sub_f = FeaturePyramid(fix_pyr.levels[i:])
        return _LevelProblem(
            level, cfg, mov_imgs[i], fix_imgs[i], sub_m, sub_f,
            [lv.dims for lv in sub_m.levels], u_coarse,
            onehot if level == 1 else None,
            fixed_labels if level == 1 else None,
        )

    initial_report, _, _ = make_problem(1, np.zeros((3, *moving.dims))).evaluate(
        np.zeros((3, *moving.dims)), False
    )

    trajectories: list[list[float]] = []
    iterations_run: list[int] = []
    seconds: list[float] = []
    phi: np.ndarray | None = None  # total field of the previously solved level
    final_report = initial_report
    for level in range(n, 0, -1):
        t0 = time.perf_counter()
        dims_l = mov_imgs[level - 1].dims
        if phi is None:
            u_coarse = np.zeros((3, *dims_l))
        else:
            u_coarse = upsample_field(DisplacementField(phi), dims_l).vectors
        problem = make_problem(level, u_coarse)
        iters = cfg.iterations[n - level]
        _, u_tot, report, traj, executed = _optimize_level(problem, iters, cfg)
        phi = u_tot
        final_report = report
        trajectories.append(traj)
        iterations_run.append(executed)
        seconds.append(time.perf_counter() - t0)

    return RegistrationResult(
        field=DisplacementField(phi),
        initial_report=initial_report,
        final_report=final_report,
        trajectories=trajectories,
        iterations_run=iterations_run,
        seconds=seconds,
    )


def warp_with_result(obj, result: RegistrationResult):
    """Apply a registration result to a tensor; labels go through the
    nearest-neighbor path."""
    if isinstance(obj, LabelVolume):
        return warp_labels(obj, result.field)
    return warp(obj, result.field)
