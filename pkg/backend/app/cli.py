"""
Command-line front end.

Usage:
    python -m backend.app.cli gen-data   [--config run.json] [--count N] [--out data.csv]
    python -m backend.app.cli train      [--config run.json] [--data data.csv] [--out model.npz]
    python -m backend.app.cli calibrate  [--config run.json] [--data ...] [--model ...] [--out table.json]
    python -m backend.app.cli coverage   [--config run.json] [--data ...] [--model ...] [--table ...]
    python -m backend.app.cli simulate   --seed S [--mode conformal|oracle] [--model ...] [--table ...]
    python -m backend.app.cli batch      [--seeds 0-199] [--model ...] [--table ...]
    python -m backend.app.cli config-reference

Exit codes: 0 success, 2 invalid configuration or data, 3 batch where no
episode ever found a feasible merge.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from backend.app.config import RunConfig, config_reference, format_validation_error, load_config
from backend.app.engine import pipeline
from backend.app.engine.artifacts import jsonable
from backend.app.engine.core import EngineError

logger = logging.getLogger("backend.app.cli")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


def parse_seeds(text: str) -> List[int]:
    """'0-9,15,20-22' → [0..9, 15, 20, 21, 22]."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merge-cp", description="Conformal CAV merging toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run configuration JSON")
    common.add_argument("--seed", type=int, help="Override the base seed (simulate: the episode seed)")
    common.add_argument("--epsilon", type=float, help="Override zone.epsilon")
    common.add_argument("--out", type=Path, help="Output file or directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="Simulate and write a trajectory dataset")
    gen.add_argument("--count", type=int, help="Total number of scenarios")

    tr = sub.add_parser("train", parents=[common], help="Train the recurrent predictor")
    tr.add_argument("--data", type=Path)

    for name, text in (("calibrate", "Build the conformal table"), ("coverage", "Evaluate coverage")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", type=Path)
        p.add_argument("--model", type=Path)
        if name == "coverage":
            p.add_argument("--table", type=Path)

    sim = sub.add_parser("simulate", parents=[common], help="Run one closed-loop episode")
    sim.add_argument("--model", type=Path)
    sim.add_argument("--table", type=Path)
    sim.add_argument("--mode", default="conformal", choices=["conformal", "oracle"])

    batch = sub.add_parser("batch", parents=[common], help="Monte-Carlo closed-loop evaluation")
    batch.add_argument("--model", type=Path)
    batch.add_argument("--table", type=Path)
    batch.add_argument("--seeds", type=str, help="Seed list, e.g. 0-199 or 1,5,9")
    batch.add_argument("--no-oracle", action="store_true", help="Skip the Problem 1 reference runs")

    sub.add_parser("config-reference", help="Print the configuration schema with defaults")
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    data = cfg.model_dump()
    if getattr(args, "epsilon", None) is not None:
        data["zone"]["epsilon"] = args.epsilon
    if getattr(args, "seed", None) is not None and args.command != "simulate":
        data["seeds"]["base"] = args.seed
    return RunConfig.model_validate(data)


def _emit(doc) -> None:
    print(json.dumps(jsonable(doc), indent=2, sort_keys=True))


def run(args: argparse.Namespace) -> int:
    if args.command == "config-reference":
        print(config_reference())
        return EXIT_OK

    cfg = _apply_overrides(load_config(args.config), args)

    if args.command == "gen-data":
        _emit(pipeline.cmd_gen_data(cfg, count=args.count, out=args.out))
    elif args.command == "train":
        _emit(pipeline.cmd_train(cfg, data=args.data, out=args.out))
    elif args.command == "calibrate":
        _emit(pipeline.cmd_calibrate(cfg, data=args.data, model=args.model, out=args.out))
    elif args.command == "coverage":
        _emit(pipeline.cmd_coverage(cfg, data=args.data, model=args.model, table_path=args.table, out=args.out))
    elif args.command == "simulate":
        seed = args.seed if args.seed is not None else cfg.seeds.base
        _emit(pipeline.cmd_simulate(cfg, seed, model=args.model, table_path=args.table,
                                    out=args.out, mode=args.mode))
    elif args.command == "batch":
        seeds = parse_seeds(args.seeds) if args.seeds else None
        report = pipeline.cmd_batch(cfg, seeds=seeds, model=args.model, table_path=args.table,
                                    out=args.out, include_oracle=not args.no_oracle)
        _emit(report.to_dict())
        if report.infeasible_everywhere:
            logger.error("no episode found a feasible merge")
            return EXIT_INFEASIBLE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(args, "log_level", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ValidationError as exc:
        for line in format_validation_error(exc):
            print(line, file=sys.stderr)
        return EXIT_INVALID
    except (EngineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
