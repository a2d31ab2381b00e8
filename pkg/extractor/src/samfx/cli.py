"""Command line: `samfx extract` runs a volume through the encoder and
writes an MVF feature volume; `samfx make-checkpoint` writes a randomly
initialized encoder checkpoint for tests and dry runs."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .mvf import MVFError
from .pipeline import ExtractorConfig, extract_file
from .vit import VARIANTS, make_checkpoint


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samfx", description="SAM encoder feature extraction")
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="encode a volume into a feature MVF")
    ex.add_argument("--input", required=True)
    ex.add_argument("--out", required=True)
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--variant", default="vit_b", choices=sorted(VARIANTS))
    ex.add_argument("--k", type=int, default=512, help="encoder input size")
    ex.add_argument("--channels", type=int, default=16)
    ex.add_argument("--device", default="cpu")
    ex.add_argument("--batch", type=int, default=4)

    mk = sub.add_parser("make-checkpoint", help="write a random test checkpoint")
    mk.add_argument("--variant", default="vit_t", choices=sorted(VARIANTS))
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.use_deterministic_algorithms(True)
    try:
        if args.command == "make-checkpoint":
            make_checkpoint(args.variant, args.out, seed=args.seed)
            return 0
        if not Path(args.input).exists():
            print(f"error: no such file: {args.input}", file=sys.stderr)
            return 2
        if not Path(args.checkpoint).exists():
            print(f"error: no such checkpoint: {args.checkpoint}", file=sys.stderr)
            return 2
        cfg = ExtractorConfig(
            checkpoint=args.checkpoint,
            variant=args.variant,
            encoder_size=args.k,
            device=args.device,
            channels=args.channels,
            batch_size=args.batch,
        )
        extract_file(args.input, args.out, cfg)
        return 0
    except (MVFError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
