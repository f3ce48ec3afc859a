"""``gdsm`` batch command line.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig, desk_config
from .errors import GDSMError
from .pipeline import SPLITS, VARIANTS, run_evaluate, run_extract, run_report, run_train


def _age_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    if not lo < hi:
        raise argparse.ArgumentTypeError("age range must satisfy LO < HI")
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdsm", description="Greedy dual-stream brain-age pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic aging cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--ages", type=_age_range, default=(19.0, 77.0))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", type=Path, default=Path("cohort"))

    p = sub.add_parser("init-config", help="write a pipeline config with default settings")
    p.add_argument("path", type=Path)
    p.add_argument("--desk", action="store_true", help="reduced slice tables for CPU-scale runs")
    p.add_argument("--manifest", default=None)
    p.add_argument("--work-dir", default=None)

    for name, help_ in (("extract", "build patch archives"), ("train", "train one model stage"),
                        ("evaluate", "score a pipeline variant"), ("report", "per-slice MAE report")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, required=True)
        if name in ("extract", "train"):
            p.add_argument("--skip-existing", action="store_true")
        if name == "train":
            p.add_argument("--stage", choices=("local", "global", "correction"), required=True)
        if name == "evaluate":
            p.add_argument("--variant", choices=VARIANTS, default="full")
            p.add_argument("--split", choices=SPLITS, default="val")
        if name == "report":
            p.add_argument("--per-slice", action="store_true", required=True)
            p.add_argument("--split", choices=SPLITS, default="val")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "phantom":
            from .phantom import generate_cohort

            seed = args.seed if args.seed is not None else int(os.environ.get("GDSM_SEED", 0))
            manifest = generate_cohort(args.n, args.ages, seed, args.out, noise_sigma=args.noise)
            print(f"wrote {len(manifest)} subjects to {args.out / 'manifest.jsonl'}")
        elif args.command == "init-config":
            cfg = desk_config() if args.desk else PipelineConfig()
            if args.manifest:
                cfg.paths.manifest = args.manifest
            if args.work_dir:
                cfg.paths.work_dir = args.work_dir
            cfg.save(args.path)
            print(f"wrote {args.path}")
        else:
            cfg = PipelineConfig.load(args.config)
            if args.command == "extract":
                ws = run_extract(cfg, args.skip_existing)
                print(f"archives in {ws.root / 'archives'}")
            elif args.command == "train":
                ws = run_train(cfg, args.stage, args.skip_existing)
                print(f"{args.stage} checkpoints in {ws.checkpoints}")
            elif args.command == "evaluate":
                report = run_evaluate(cfg, args.split, args.variant)
                print(report.to_text(f"variant={args.variant} split={args.split}"), end="")
            elif args.command == "report":
                print(f"wrote {run_report(cfg, args.split)}")
    except GDSMError as exc:
        print(f"gdsm: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"gdsm: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
