#!/usr/bin/env python3
"""
MLANet command line.

    python app.py train --config run.json [--fold k] [--resume ckpt]
    python app.py eval --checkpoint model.ckpt --data frames.extxyz
    python app.py md --checkpoint model.ckpt --structure start.extxyz --steps N --dt 0.5 [--temp 300]
    python app.py learning-curve --config run.json --sizes 10,100,500
    python app.py bench --checkpoint model.ckpt --structure frames.extxyz --repeat 5 [--supercells 3,4,6]
    python app.py verify [--full]

Results go to the configured output directory (MLANET_OUTPUT_DIR overrides).
Exit 0 on success, 1 with a JSON error record on failure, 2 on bad flags.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from typing import List, Optional

from modules import commands
from modules.config import LOG_LEVEL_ENV, RunConfig, load_run_config
from modules.errors import MLANetError

LOG = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="Equivariant attention interatomic potential")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")
    parser.add_argument("--output-dir", default=None, help="Override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, default=None, help="k-fold test fold index")
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")

    p = sub.add_parser("eval", help="Score a checkpoint on an extxyz file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("md", help="Molecular dynamics with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--dt", type=float, default=0.5, help="Time step in fs")
    p.add_argument("--temp", type=float, default=None, help="Langevin temperature in K")
    p.add_argument("--config", default=None, help="Run config for MD thresholds and thermostat")

    p = sub.add_parser("learning-curve", help="Test MAE against training-set size")
    p.add_argument("--config", required=True)
    p.add_argument("--sizes", required=True, help="Comma-separated training sizes")
    p.add_argument("--test-size", type=int, default=None)

    p = sub.add_parser("bench", help="Inference latency table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", default=None)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--supercells", default="", help="Comma-separated diamond supercell sizes, e.g. 3,4,6")

    p = sub.add_parser("verify", help="Run the verification oracle suite")
    p.add_argument("--full", action="store_true", help="Acceptance-size sweeps")
    return parser


def configure_logging(verbose: bool) -> None:
    level_name = os.getenv(LOG_LEVEL_ENV)
    level = logging.DEBUG if verbose else getattr(logging, (level_name or "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s', force=True)


def dispatch(args: argparse.Namespace) -> dict:
    out = args.output_dir
    if args.command == "train":
        return commands.train_command(load_run_config(args.config), fold=args.fold, resume=args.resume,
                                      output_dir=out)
    if args.command == "eval":
        return commands.eval_command(args.checkpoint, args.data, output_dir=out, batch_size=args.batch_size)
    if args.command == "md":
        config = load_run_config(args.config) if args.config else RunConfig()
        return commands.md_command(args.checkpoint, args.structure, args.steps, args.dt, args.temp,
                                   config=config, output_dir=out)
    if args.command == "learning-curve":
        return commands.learning_curve_command(load_run_config(args.config), commands.parse_sizes(args.sizes),
                                               test_size=args.test_size, output_dir=out)
    if args.command == "bench":
        supercells = commands.parse_sizes(args.supercells) if args.supercells else []
        return commands.bench_command(args.checkpoint, args.structure, args.repeat, supercells, output_dir=out)
    if args.command == "verify":
        return commands.verify_command(full=args.full, output_dir=out)
    raise MLANetError(f"unknown command {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    configure_logging(args.verbose)

    try:
        result = dispatch(args)
    except MLANetError as e:
        LOG.error(f"❌ {args.command} failed: {e}")
        print(json.dumps(e.to_record()))
        return 1
    except Exception as e:
        LOG.error(f"❌ {args.command} crashed: {e}")
        LOG.error(traceback.format_exc())
        print(json.dumps({"status": "error", "category": "internal", "message": str(e)}))
        return 1

    print(json.dumps(result, default=str, sort_keys=True))
    return 0 if result.get("status", "ok") == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
