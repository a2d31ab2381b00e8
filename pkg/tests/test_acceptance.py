"""Acceptance suite: one test per criterion, each printing a PASS/FAIL
line (run with ``pytest -s tests/test_acceptance.py`` to see them).

The recovery, robustness and ablation experiments run the real engine
end to end on seeded synthetic corpora; everything else is checked
against independent oracles at the stated tolerances.
"""

import json
import time

import numpy as np

import voxalign as va
from voxalign import synth
from voxalign.cli import main as cli_main
from voxalign.features import build_pyramid
from voxalign.losses import LossWeights, hfc_loss, ncc_loss, smoothness_loss, soft_dice_loss
from voxalign.solver import SolverConfig
from voxalign.tensors import (
    DisplacementField,
    FeatureVolume,
    LabelVolume,
    Volume,
    read_mvf,
    write_mvf,
)

from conftest import smooth_field, smooth_volume
from oracles import euler_displacement, hd95_bruteforce, smooth_velocity


def check(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def test_gradient_correctness():
    """Analytic gradients match central finite differences (rel < 1e-4,
    100 random sites per loss, < 30 s total)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    dims = (16, 16, 16)
    h = 1e-4
    worst = {}

    I = smooth_volume(dims, 201)
    J = smooth_volume(dims, 202)
    fixed = Volume(J)
    _, g = ncc_loss(Volume(I), fixed, 5)
    errs = []
    for _ in range(100):
        q = tuple(rng.integers(0, 16, 3))
        Ip = I.copy(); Ip[q] += h
        Im = I.copy(); Im[q] -= h
        fd = (ncc_loss(Volume(Ip), fixed, 5)[0] - ncc_loss(Volume(Im), fixed, 5)[0]) / (2 * h)
        errs.append(rel_err(g[q], fd))
    worst["ncc"] = max(errs)

    C = 3
    mov = build_pyramid(FeatureVolume(np.stack([smooth_volume(dims, 210 + i) for i in range(C)])), 2)
    fix = build_pyramid(FeatureVolume(np.stack([smooth_volume(dims, 220 + i) for i in range(C)])), 2)
    u = [smooth_field(dims, 230, amplitude=0.49), smooth_field((8, 8, 8), 231, amplitude=0.49)]
    _, grads, _ = hfc_loss(mov, fix, [DisplacementField(x) for x in u])
    errs = []
    for _ in range(100):
        lev = int(rng.integers(0, 2))
        c = int(rng.integers(0, 3))
        q = tuple(int(rng.integers(1, u[lev].shape[1 + a] - 1)) for a in range(3))
        up = u[lev].copy(); up[(c, *q)] += h
        um = u[lev].copy(); um[(c, *q)] -= h
        fp = [DisplacementField(up if i == lev else u[i]) for i in range(2)]
        fm = [DisplacementField(um if i == lev else u[i]) for i in range(2)]
        fd = (hfc_loss(mov, fix, fp)[0] - hfc_loss(mov, fix, fm)[0]) / (2 * h)
        errs.append(rel_err(grads[lev][(c, *q)], fd))
    worst["hfc"] = max(errs)

    labels = np.zeros(dims, dtype=np.int32)
    labels[3:8, 3:8, 3:8] = 1
    labels[9:14, 8:14, 4:10] = 2
    lv = LabelVolume(labels)
    probs = np.clip(0.5 + 0.15 * np.stack([smooth_volume(dims, 240 + i) for i in range(2)]), 0.05, 0.95)
    _, dg = soft_dice_loss(FeatureVolume(probs), lv)
    errs = []
    for _ in range(100):
        c = int(rng.integers(0, 2))
        q = tuple(rng.integers(0, 16, 3))
        pp = probs.copy(); pp[(c, *q)] += h
        pm = probs.copy(); pm[(c, *q)] -= h
        fd = (soft_dice_loss(FeatureVolume(pp), lv)[0] - soft_dice_loss(FeatureVolume(pm), lv)[0]) / (2 * h)
        errs.append(rel_err(dg[(c, *q)], fd))
    worst["dice"] = max(errs)

    us = smooth_field(dims, 250)
    _, sg = smoothness_loss(DisplacementField(us))
    errs = []
    for _ in range(100):
        c = int(rng.integers(0, 3))
        q = tuple(rng.integers(0, 16, 3))
        up = us.copy(); up[(c, *q)] += h
        um = us.copy(); um[(c, *q)] -= h
        fd = (smoothness_loss(DisplacementField(up))[0] - smoothness_loss(DisplacementField(um))[0]) / (2 * h)
        errs.append(rel_err(sg[(c, *q)], fd))
    worst["smooth"] = max(errs)

    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 30.0
    check("gradient-correctness", ok,
          f"worst rel err {max(worst.values()):.2e} ({worst}), {elapsed:.1f}s")


INTEGRATION_SEEDS = (11, 12)
INTEGRATION_AMPLITUDE = 0.9


def test_integration_oracle():
    """Scaling-and-squaring (7 steps) vs 1024-step Euler flow on smooth
    32^3 fields: interior max discrepancy < 1e-3 voxels, < 10 s."""
    t0 = time.perf_counter()
    dims = (32, 32, 32)
    worst = 0.0
    for seed in INTEGRATION_SEEDS:
        v = smooth_velocity(dims, seed, amplitude=INTEGRATION_AMPLITUDE)
        ue, _ = euler_displacement(v, 1024, margin=4)
        u = va.integrate_velocity(DisplacementField(v), 7)
        worst = max(worst, float(np.abs(u.vectors[:, 4:-4, 4:-4, 4:-4] - ue).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 10.0
    check("integration-oracle", ok, f"max discrepancy {worst:.2e}, {elapsed:.1f}s")


def test_inverse_consistency():
    """exp(v) o exp(-v) stays within 1e-3 voxels of the identity."""
    dims = (32, 32, 32)
    worst = 0.0
    for seed in INTEGRATION_SEEDS:
        v = smooth_velocity(dims, seed, amplitude=INTEGRATION_AMPLITUDE)
        fwd = va.integrate_velocity(DisplacementField(v), 7)
        bwd = va.integrate_velocity(DisplacementField(-v), 7)
        comp = va.compose_fields(fwd, bwd)
        worst = max(worst, float(np.abs(comp.vectors[:, 4:-4, 4:-4, 4:-4]).max()))
    check("inverse-consistency", worst < 1e-3, f"max residual {worst:.2e}")


def _random_mask(rng, dims):
    kind = rng.integers(0, 3)
    m = np.zeros(dims, dtype=bool)
    if kind == 0:  # cuboid
        lo = [int(rng.integers(0, d - 1)) for d in dims]
        hi = [int(rng.integers(l + 1, d + 1)) for l, d in zip(lo, dims)]
        m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    elif kind == 1:  # ball
        c = [rng.uniform(1, d - 2) for d in dims]
        r = rng.uniform(1.0, min(dims) / 2)
        g = np.indices(dims, dtype=np.float64)
        m = ((g - np.reshape(c, (3, 1, 1, 1))) ** 2).sum(axis=0) <= r * r
    else:  # sparse blob union
        for _ in range(int(rng.integers(1, 4))):
            p = [int(rng.integers(0, d)) for d in dims]
            m[max(0, p[0] - 1):p[0] + 2, max(0, p[1] - 1):p[1] + 2, max(0, p[2] - 1):p[2] + 2] = True
    return m


def test_metric_oracles():
    """hd95 equals exhaustive brute force on 200 random mask pairs
    (exact); dice matches voxel counting; sdlogj base cases."""
    rng = np.random.default_rng(77)
    pairs = 0
    while pairs < 200:
        dims = tuple(int(rng.integers(3, 17)) for _ in range(3))
        a = _random_mask(rng, dims)
        b = _random_mask(rng, dims)
        if not a.any() or not b.any():
            continue
        spacing = tuple(float(s) for s in rng.uniform(0.5, 4.0, 3))
        got = va.hd95(LabelVolume(a.astype(np.int32)), LabelVolume(b.astype(np.int32)), 1, spacing)
        want = hd95_bruteforce(a, b, spacing)
        assert got == want, f"hd95 mismatch: {got} vs {want} on dims {dims}"
        d_got = va.dice_score(LabelVolume(a.astype(np.int32)), LabelVolume(b.astype(np.int32)), 1)
        inter = int((a & b).sum())
        d_want = 100.0 * 2 * inter / (int(a.sum()) + int(b.sum()))
        assert d_got == d_want
        pairs += 1

    assert va.sdlogj(DisplacementField.zeros((8, 8, 8))) == 0.0
    expansion = DisplacementField(0.1 * np.indices((8, 8, 8), dtype=np.float64))
    assert abs(va.sdlogj(expansion)) < 1e-12
    check("metric-oracles", True, f"{pairs} hd95/dice pairs exact, sdlogj base cases hold")


def test_recovery_experiment(tmp_path):
    """synth spheres 64^3 + svf, register with defaults: foreground EPE
    <= 0.5 voxels, warped-label Dice >= 95%, SDlogJ <= 0.3, folding
    <= 0.5%, single run < 60 s."""
    case_dir = tmp_path / "case"
    out_dir = tmp_path / "reg"
    assert cli_main(["synth", "--kind", "spheres", "--dims", "64,64,64",
                     "--deform", "svf", "--seed", "5", "--out", str(case_dir)]) == 0
    t0 = time.perf_counter()
    code = cli_main(["register",
                     "--moving", str(case_dir / "moving.mvf"),
                     "--fixed", str(case_dir / "fixed.mvf"),
                     "--labels-moving", str(case_dir / "labels_moving.mvf"),
                     "--labels-fixed", str(case_dir / "labels_fixed.mvf"),
                     "--truth-field", str(case_dir / "g_true.mvf"),
                     "--out", str(out_dir)])
    elapsed = time.perf_counter() - t0
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    epe = report["endpoint_error_foreground"]
    sdlj = report["sdlogj"]
    folding = report["folding"]
    warped = read_mvf(out_dir / "warped_labels.mvf")
    fixed_labels = read_mvf(case_dir / "labels_fixed.mvf")
    dices = [va.dice_score(warped, fixed_labels, l) for l in fixed_labels.foreground_labels]
    dice = float(np.mean(dices))
    ok = epe <= 0.5 and dice >= 95.0 and sdlj <= 0.3 and folding <= 0.005 and elapsed < 60.0
    check("recovery-experiment", ok,
          f"EPE {epe:.3f} vox, Dice {dice:.2f}%, SDlogJ {sdlj:.3f}, "
          f"folding {folding:.4f}, {elapsed:.1f}s")


ROBUSTNESS_DIMS = (24, 24, 24)
ROBUSTNESS_CFG = dict(levels=3, iterations=(60, 40, 25))


def _perturbed_dice(seed, lam_hfc, gamma, sigma):
    case = synth.generate_case("spheres", ROBUSTNESS_DIMS, "svf", seed=seed)
    rng = np.random.default_rng(seed + 1000)
    moving = synth.add_noise(synth.gamma_correct(case["moving"], gamma), sigma, rng)
    cfg = SolverConfig(weights=LossWeights(1.0, lam_hfc, 0.0, 1.0), **ROBUSTNESS_CFG)
    res = va.register(moving, case["fixed"], cfg=cfg)
    warped = va.warp_with_result(case["labels_moving"], res)
    return float(np.mean([va.dice_score(warped, case["labels_fixed"], l)
                          for l in case["labels_fixed"].foreground_labels]))


def test_robustness_trend():
    """Under gamma {0.5,1,2} x noise {0,0.05,0.1} on the moving image,
    the feature-consistency configuration degrades mean Dice strictly
    less than the intensity-only configuration (10 seeded cases)."""
    combos = [(g, s) for g in (0.5, 1.0, 2.0) for s in (0.0, 0.05, 0.1)]
    degradation = {}
    for lam in (1.0, 0.0):
        per_case = []
        for seed in range(10):
            dice = {c: _perturbed_dice(seed, lam, *c) for c in combos}
            base = dice[(1.0, 0.0)]
            others = [v for k, v in dice.items() if k != (1.0, 0.0)]
            per_case.append(base - float(np.mean(others)))
        degradation[lam] = float(np.mean(per_case))
    ok = degradation[1.0] < degradation[0.0]
    check("robustness-trend", ok,
          f"mean Dice degradation with HFC {degradation[1.0]:.3f} < "
          f"without {degradation[0.0]:.3f}")


def test_ablation_direction():
    """Full loss (NCC+HFC) reaches mean Dice >= each single-term variant
    on the recovery corpus."""
    variants = {"full": (1.0, 1.0), "ncc_only": (1.0, 0.0), "hfc_only": (0.0, 1.0)}
    means = {}
    for name, (l0, l1) in variants.items():
        ds = []
        for seed in range(6):
            case = synth.generate_case("spheres", ROBUSTNESS_DIMS, "svf", seed=seed)
            cfg = SolverConfig(weights=LossWeights(l0, l1, 0.0, 1.0), **ROBUSTNESS_CFG)
            res = va.register(case["moving"], case["fixed"], cfg=cfg)
            warped = va.warp_with_result(case["labels_moving"], res)
            ds.append(float(np.mean([va.dice_score(warped, case["labels_fixed"], l)
                                     for l in case["labels_fixed"].foreground_labels])))
        means[name] = float(np.mean(ds))
    ok = means["full"] >= means["ncc_only"] and means["full"] >= means["hfc_only"]
    check("ablation-direction", ok,
          f"full {means['full']:.2f} vs ncc {means['ncc_only']:.2f} / hfc {means['hfc_only']:.2f}")


def test_hfc_two_level_weighting():
    """Constructed two-level pyramid with unit per-level discrepancy
    yields exactly 1 + 1/2."""
    from voxalign.features import FeaturePyramid

    mov = FeaturePyramid([FeatureVolume(np.zeros((1, 8, 8, 8))),
                          FeatureVolume(np.zeros((1, 4, 4, 4)))])
    fix = FeaturePyramid([FeatureVolume(np.ones((1, 8, 8, 8))),
                          FeatureVolume(np.ones((1, 4, 4, 4)))])
    fields = [DisplacementField.zeros((8, 8, 8)), DisplacementField.zeros((4, 4, 4))]
    total, _, _ = hfc_loss(mov, fix, fields)
    check("hfc-weighting", total == 1.5, f"L_HFC = {total!r}")


def test_mvf_roundtrip_1000(tmp_path):
    """write -> read -> write byte identity on 1000 randomized tensors."""
    rng = np.random.default_rng(4242)
    p1 = tmp_path / "a.mvf"
    p2 = tmp_path / "b.mvf"
    for i in range(1000):
        dims = tuple(int(rng.integers(1, 7)) for _ in range(3))
        kind = i % 4
        if kind == 0:
            tensor = Volume(rng.normal(size=dims), spacing=tuple(rng.uniform(0.5, 5, 3)))
        elif kind == 1:
            tensor = FeatureVolume(rng.normal(size=(int(rng.integers(1, 5)), *dims)))
        elif kind == 2:
            tensor = LabelVolume(rng.integers(0, 5, dims))
        else:
            tensor = DisplacementField(rng.normal(size=(3, *dims)))
        write_mvf(p1, tensor)
        back = read_mvf(p1, kind="field" if kind == 3 else "auto")
        write_mvf(p2, back)
        assert p1.read_bytes() == p2.read_bytes(), f"roundtrip differs at case {i}"
    check("mvf-roundtrip", True, "1000 tensors byte-identical")
