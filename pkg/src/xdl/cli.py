"""Command-line entry point: ``xdl <stage> [--config PATH] [--out DIR] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .pipeline import STAGES, ConfigError, StageError, default_config_text, load_config, run_pipeline

HELP = {
    "generate": "synthesize (or ingest) scenes and write the feature file",
    "train-base": "train the audio and visual base classifiers",
    "evaluate": "score both base models with the multiple-choice protocol",
    "analyze-gap": "compare class-wise accuracies and write gap labels",
    "train-switch": "train the distillation switch on the analysis split",
    "distill": "run switch-routed distillation",
    "ablate": "run every ablation row",
    "report": "write the combined summary and charts",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdl",
        description="Cross-modal distillation lab. Each command runs every earlier stage first, reusing cached results.",
    )
    parser.add_argument("--version", action="version", version=f"xdl {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="command")
    for stage in STAGES:
        p = sub.add_parser(stage, help=HELP[stage], description=HELP[stage])
        p.add_argument("--config", help="INI config file (default: the bundled default.ini)")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
        p.add_argument("--force", action="store_true", help="ignore cached stage results")
        p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    dump = sub.add_parser("show-config", help="print the bundled default config")
    dump.set_defaults(show=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "show", False):
        sys.stdout.write(default_config_text())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(out=args.out, seed=args.seed)
    except ConfigError as exc:
        print(f"xdl: stage config failed in module xdl.pipeline (input: {args.config or 'default.ini'}): {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_pipeline(cfg, args.stage, force=args.force)
    except StageError as exc:
        print(f"xdl: {exc}", file=sys.stderr)
        return 1
    for stage, info in manifest.stages.items():
        print(f"{stage:13s} {info['status']}")
    print(f"manifest: {cfg.out_dir / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
