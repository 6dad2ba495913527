from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

from celltrack_sr.config import PROFILES, resolve_config
from celltrack_sr.errors import CellTrackError, SolverDivergedError
from celltrack_sr.pipeline import BASELINES, COMMANDS, SOLVER_METHODS, run_pipeline

logger = logging.getLogger("celltrack_sr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="celltrack-sr",
        description="Training-free video super-resolution and cell tracking on synthetic or real microscopy videos.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="manifest.<command>.json from an earlier run, or a KEY=VALUE file")
    parser.add_argument("--profile", choices=PROFILES, help="configuration profile (default: paper)")
    parser.add_argument("--method", choices=BASELINES + SOLVER_METHODS, help="super-resolution method")
    parser.add_argument("--methods", nargs="+", choices=BASELINES + SOLVER_METHODS, help="methods compared by 'compare'")
    parser.add_argument("--lambda", dest="lam", type=float, help="TV weight for RDPV-TVa / RDPV-TVi")
    parser.add_argument("--scale", type=int, help="magnification factor L")
    parser.add_argument("--seed", type=int, help="base seed")
    parser.add_argument("--out", help="corpus / output directory")
    parser.add_argument("--input", help="directory of real frames to ingest (degrade)")
    parser.add_argument("--sources", nargs="+", help="restrict track/metrics to these sources")
    parser.add_argument("--db", help="results database path (default <out>/results.db)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _cli_overrides(args: argparse.Namespace) -> Dict[str, object]:
    cli: Dict[str, object] = {
        "PROFILE": args.profile,
        "LAMBDA": args.lam,
        "SCALE": args.scale,
        "SEED": args.seed,
        "OUT": args.out,
    }
    # baselines are not solver methods; they only pick an output directory
    if args.method in SOLVER_METHODS:
        cli["METHOD"] = args.method
    return {k: v for k, v in cli.items() if v is not None}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else os.getenv("CELLTRACK_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=level,
    )

    options: Dict[str, object] = {}
    if args.command == "superres":
        options["method"] = args.method
    elif args.command == "compare" and args.methods:
        options["methods"] = args.methods
    elif args.command == "degrade" and args.input:
        options["input_dir"] = args.input
    elif args.command in ("track", "metrics") and args.sources:
        options["sources"] = args.sources

    try:
        cfg = resolve_config(config_path=args.config, cli=_cli_overrides(args))
        result = asyncio.run(run_pipeline(args.command, cfg, db_path=args.db, **options))
    except SolverDivergedError as exc:
        logger.error("Solver diverged: %s", exc)
        return 1
    except CellTrackError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    for path in result.artifacts:
        print(path)
    return result.status


if __name__ == "__main__":
    sys.exit(main())
