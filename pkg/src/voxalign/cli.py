"""Command-line surface.

Subcommands: register, warp, metrics, synth, features.  All tensors
flow through MVF files so any external feature extractor can interpose.
Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import synth
from .features import extract_fallback_features, reduce_channels
from .fields import jacobian_map, warp, warp_labels
from .metrics import evaluate_labels, folding_from_map, sdlogj_from_map
from .solver import NonFiniteLossError, SolverConfig, register
from .tensors import LabelVolume, MVFError, read_mvf, write_mvf


class InputError(Exception):
    """Bad flags or unusable input files (exit code 2)."""


def _read(path, kind="auto"):
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    try:
        return read_mvf(p, kind=kind)
    except (MVFError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _parse_dims(text: str):
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise InputError(f"bad dims {text!r}, expected H,W,D")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise InputError(f"bad dims {text!r}, expected three positive ints")
    return parts


def _parse_spacing(text: str):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise InputError(f"bad spacing {text!r}, expected sx,sy,sz")
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise InputError(f"bad spacing {text!r}, expected three positive reals")
    return parts


def _load_config(arg: str | None) -> SolverConfig:
    if arg is None:
        return SolverConfig()
    text = arg.strip()
    if not text.startswith("{"):
        p = Path(arg)
        if not p.exists():
            raise InputError(f"no such config file: {p}")
        text = p.read_text()
    try:
        return SolverConfig.from_json(text)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise InputError(f"bad solver config: {exc}") from exc


def cmd_register(args) -> int:
    moving = _read(args.moving, kind="volume")
    fixed = _read(args.fixed, kind="volume")
    feat_m = _read(args.feat_moving, kind="features") if args.feat_moving else None
    feat_f = _read(args.feat_fixed, kind="features") if args.feat_fixed else None
    labs_m = _read(args.labels_moving, kind="labels") if args.labels_moving else None
    labs_f = _read(args.labels_fixed, kind="labels") if args.labels_fixed else None
    truth = _read(args.truth_field, kind="field") if args.truth_field else None
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    try:
        result = register(moving, fixed, feat_m, feat_f, labs_m, labs_f, cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    write_mvf(out / "field.mvf", result.field)
    write_mvf(out / "warped.mvf", warp(moving, result.field))
    if labs_m is not None:
        write_mvf(out / "warped_labels.mvf", warp_labels(labs_m, result.field))

    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("level,iteration,loss\n")
        nlev = len(result.trajectories)
        for i, traj in enumerate(result.trajectories):
            level = nlev - i  # execution order is coarse -> fine
            for it, loss in enumerate(traj):
                fh.write(f"{level},{it},{loss!r}\n")

    jmap = jacobian_map(result.field)
    report = {
        "initial": result.initial_report.as_dict(),
        "final": result.final_report.as_dict(),
        "iterations_per_level": result.iterations_run,
        "seconds_per_level": result.seconds,
        "sdlogj": sdlogj_from_map(jmap),
        "folding": folding_from_map(jmap),
    }
    if truth is not None:
        if truth.dims != result.field.dims:
            raise InputError("truth field dims do not match")
        diff = result.field.vectors - truth.vectors
        err = np.sqrt((diff * diff).sum(axis=0))
        report["endpoint_error_mean"] = float(err.mean())
        if labs_f is not None:
            mask = labs_f.labels > 0
            if mask.any():
                report["endpoint_error_foreground"] = float(err[mask].mean())
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_warp(args) -> int:
    field = _read(args.field, kind="field")
    if args.nearest:
        labels = _read(args.input, kind="labels")
        try:
            out = warp_labels(labels, field)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    else:
        vol = _read(args.input)
        if isinstance(vol, LabelVolume):
            raise InputError("label input requires --nearest")
        try:
            out = warp(vol, field)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    write_mvf(args.out, out)
    return 0


def cmd_metrics(args) -> int:
    a = _read(args.labels_a, kind="labels")
    b = _read(args.labels_b, kind="labels")
    field = _read(args.field, kind="field") if args.field else None
    spacing = _parse_spacing(args.spacing) if args.spacing else (1.0, 1.0, 1.0)
    try:
        report = evaluate_labels(a, b, spacing=spacing, field=field, case=args.case)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    print(report.to_json())
    if args.out:
        base = Path(args.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".json").write_text(report.to_json() + "\n")
        base.with_suffix(".csv").write_text(report.to_csv())
    return 0


def cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    if args.kind not in synth.PHANTOM_KINDS:
        raise InputError(f"unknown kind {args.kind!r}; options: {synth.PHANTOM_KINDS}")
    if args.deform not in synth.DEFORM_KINDS:
        raise InputError(f"unknown deform {args.deform!r}; options: {synth.DEFORM_KINDS}")
    if args.gamma <= 0:
        raise InputError("gamma must be positive")
    if args.noise_sigma < 0:
        raise InputError("noise sigma must be non-negative")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case = synth.generate_case(
        args.kind, dims, args.deform, gamma=args.gamma,
        noise_sigma=args.noise_sigma, seed=args.seed,
    )
    write_mvf(out / "moving.mvf", case["moving"])
    write_mvf(out / "fixed.mvf", case["fixed"])
    write_mvf(out / "labels_moving.mvf", case["labels_moving"])
    write_mvf(out / "labels_fixed.mvf", case["labels_fixed"])
    write_mvf(out / "g_true.mvf", case["g_true"])
    write_mvf(out / "moving_perturbed.mvf", case["moving_perturbed"])
    return 0


def cmd_features(args) -> int:
    vol = _read(args.input, kind="volume")
    feats = extract_fallback_features(vol)
    if args.channels:
        try:
            feats = reduce_channels(feats, args.channels)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    write_mvf(args.out, feats)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxalign",
                                description="feature-driven deformable volume registration")
    sub = p.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register a moving volume to a fixed volume")
    reg.add_argument("--moving", required=True)
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--feat-moving")
    reg.add_argument("--feat-fixed")
    reg.add_argument("--labels-moving")
    reg.add_argument("--labels-fixed")
    reg.add_argument("--config", help="solver config as JSON file or inline JSON")
    reg.add_argument("--truth-field", help="ground-truth field for endpoint error reporting")
    reg.add_argument("--out", required=True, help="output directory")
    reg.set_defaults(func=cmd_register)

    wp = sub.add_parser("warp", help="apply a displacement field to a tensor")
    wp.add_argument("--input", required=True)
    wp.add_argument("--field", required=True)
    wp.add_argument("--out", required=True)
    wp.add_argument("--nearest", action="store_true", help="nearest-neighbor (labels)")
    wp.set_defaults(func=cmd_warp)

    met = sub.add_parser("metrics", help="Dice / HD95 / SDlogJ between label grids")
    met.add_argument("--labels-a", required=True, help="warped labels")
    met.add_argument("--labels-b", required=True, help="fixed labels")
    met.add_argument("--field", help="field for SDlogJ and folding")
    met.add_argument("--spacing", help="sx,sy,sz in millimeters")
    met.add_argument("--case", default="case")
    met.add_argument("--out", help="basename for .json/.csv outputs")
    met.set_defaults(func=cmd_metrics)

    sy = sub.add_parser("synth", help="generate a synthetic phantom case")
    sy.add_argument("--kind", required=True, choices=list(synth.PHANTOM_KINDS))
    sy.add_argument("--dims", required=True, help="H,W,D")
    sy.add_argument("--deform", default="svf", choices=list(synth.DEFORM_KINDS))
    sy.add_argument("--gamma", type=float, default=1.0)
    sy.add_argument("--noise-sigma", type=float, default=0.0)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True, help="output directory")
    sy.set_defaults(func=cmd_synth)

    fe = sub.add_parser("features", help="extract fallback structural features")
    fe.add_argument("--input", required=True)
    fe.add_argument("--out", required=True)
    fe.add_argument("--channels", type=int)
    fe.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MVFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
