"""
Pipeline Orchestrator

    gen-data   → simulate scenarios, write trajectory CSV + arrival sidecar
    train      → fit the recurrent predictor, write checkpoint + loss curve
    calibrate  → conformal table on the calibration split
    coverage   → hit rates of the table on the test split
    simulate   → one closed-loop episode + plot data
    batch      → Monte-Carlo evaluation over the evaluation seeds

Shared by the CLI and the HTTP routes. Each command returns a JSON-ready
summary dict and writes its artifacts under the configured paths.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from backend.app.config import RunConfig

from .artifacts import (
    load_checkpoint,
    load_table,
    loss_curve_csv,
    plot_csv,
    save_checkpoint,
    save_table,
    write_json,
    write_text,
)
from .conformal import build_table, evaluate_coverage, mean_score_trend, monotonize, score_grid
from .core import EngineError, ZoneConfig
from .hdv_sim import ScenarioTrace, generate_traces
from .loop import BatchReport, batch_evaluate, run_closed_loop
from .metrics import spearman_trend
from .parser import load_dataset, parse_sidecar, parse_trajectories, save_dataset
from .predictors.base import ArrivalPredictor, ObservationScale, collect_trajectories
from .predictors.physics import PhysicsPredictor
from .predictors.recurrent import RecurrentPredictor, train

logger = logging.getLogger(__name__)


DATA_SPLITS = ("train", "calibration", "test")


def _split_counts(total: int, weights: Sequence[int]) -> List[int]:
    """Largest-remainder split of `total` proportional to `weights`."""
    weight_sum = sum(weights)
    if weight_sum == 0:
        return [total] + [0] * (len(weights) - 1)
    raw = [total * w / weight_sum for w in weights]
    counts = [int(r) for r in raw]
    order = sorted(range(len(weights)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _select(traces: Sequence[ScenarioTrace], splits: Dict[str, List[int]], name: str) -> List[ScenarioTrace]:
    if name not in splits:
        raise EngineError(f"dataset has no '{name}' split")
    wanted = set(splits[name])
    return [t for t in traces if t.seed in wanted]


def _paths(cfg: RunConfig, key: str, override: Optional[Path]) -> Path:
    return Path(override) if override is not None else Path(getattr(cfg.paths, key))


def load_predictor(cfg: RunConfig, model: Optional[Path] = None) -> ArrivalPredictor:
    """Physics predictors need no file; recurrent ones load the checkpoint."""
    zone = cfg.zone.to_zone()
    if cfg.predictor.kind == "physics" and model is None:
        return PhysicsPredictor(zone)
    return load_checkpoint(_paths(cfg, "model", model), zone)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, count: Optional[int] = None, out: Optional[Path] = None) -> Dict[str, Any]:
    zone = cfg.zone.to_zone()
    template = cfg.template.to_template()
    ranges = cfg.seeds.ranges()
    sizes = [len(ranges[name]) for name in DATA_SPLITS]
    if count is not None:
        sizes = _split_counts(count, sizes)

    traces: List[ScenarioTrace] = []
    splits: Dict[str, List[int]] = {}
    start = cfg.seeds.base
    for name, size in zip(DATA_SPLITS, sizes):
        seeds = range(start, start + size)
        start += size
        generated = generate_traces(seeds, template, zone)
        splits[name] = [t.seed for t in generated]
        traces.extend(generated)
        logger.info("generated %d %s scenarios", len(generated), name)

    path, side = save_dataset(_paths(cfg, "data", out), traces, zone, splits)
    return {
        "data": str(path),
        "sidecar": str(side),
        "scenarios": {name: len(seeds) for name, seeds in splits.items()},
    }


def cmd_train(cfg: RunConfig, data: Optional[Path] = None, out: Optional[Path] = None) -> Dict[str, Any]:
    zone = cfg.zone.to_zone()
    out_path = _paths(cfg, "model", out)
    if cfg.predictor.kind == "physics":
        save_checkpoint(out_path, PhysicsPredictor(zone))
        return {"model": str(out_path), "kind": "physics", "loss_curve": []}

    traces, splits = load_dataset(_paths(cfg, "data", data), zone)
    train_traces = _select(traces, splits, "train") if splits else traces
    dataset = collect_trajectories(train_traces, per_scenario="all")
    scale = ObservationScale.for_zone(zone, anchored=cfg.predictor.anchored)

    started = time.time()
    result = train(dataset, zone, cfg.predictor.to_hyper(), scale=scale)
    predictor = RecurrentPredictor(zone, result.params, scale)
    save_checkpoint(out_path, predictor)
    curve_path = write_text(out_path.with_suffix(".loss.csv"), loss_curve_csv(result.loss_curve))
    return {
        "model": str(out_path),
        "kind": "recurrent",
        "loss_curve_file": str(curve_path),
        "initial_loss": result.loss_curve[0],
        "final_loss": result.loss_curve[-1],
        "trajectories": len(dataset),
        "fingerprint": predictor.fingerprint(),
        "training_time_seconds": round(time.time() - started, 3),
    }


def cmd_calibrate(
    cfg: RunConfig,
    data: Optional[Path] = None,
    model: Optional[Path] = None,
    out: Optional[Path] = None,
) -> Dict[str, Any]:
    zone = cfg.zone.to_zone()
    predictor = load_predictor(cfg, model)
    traces, splits = load_dataset(_paths(cfg, "data", data), zone)
    calib = collect_trajectories(_select(traces, splits, "calibration"), per_scenario="one")
    table = build_table(calib, predictor, zone)
    if cfg.monotonize:
        table = monotonize(table)
    path = save_table(_paths(cfg, "table", out), table)
    return {
        "table": str(path),
        "epsilon": table.epsilon,
        "calibration_trajectories": len(calib),
        "max_cell_size": table.calib_size,
        "infinite_cells": int(np.isinf(table.bounds).sum()),
        "monotonized": table.monotonized,
        "fingerprint": table.fingerprint,
    }


def coverage_summary(test, predictor: ArrivalPredictor, table, zone: ZoneConfig) -> Dict[str, Any]:
    """Coverage report plus the per-candidate Spearman trend of mean scores over t."""
    report = evaluate_coverage(test, predictor, table, zone)
    scores, valid = score_grid(test, predictor, zone)
    means = mean_score_trend(scores, valid)
    trends = []
    for l in range(zone.num_candidates):
        rho, p = spearman_trend(means[:, l])
        trends.append({"candidate": l, "spearman_rho": rho, "p_value": p})
    doc = report.to_dict()
    doc["test_trajectories"] = len(test)
    doc["score_trend"] = trends
    return doc


def cmd_coverage(
    cfg: RunConfig,
    data: Optional[Path] = None,
    model: Optional[Path] = None,
    table_path: Optional[Path] = None,
    out: Optional[Path] = None,
) -> Dict[str, Any]:
    zone = cfg.zone.to_zone()
    predictor = load_predictor(cfg, model)
    table = load_table(_paths(cfg, "table", table_path))
    traces, splits = load_dataset(_paths(cfg, "data", data), zone)
    test = collect_trajectories(_select(traces, splits, "test"), per_scenario="one")
    doc = coverage_summary(test, predictor, table, zone)
    out_path = Path(out) if out is not None else Path(cfg.paths.out_dir) / "coverage.json"
    write_json(out_path, doc)
    doc["report"] = str(out_path)
    return doc


def cmd_simulate(
    cfg: RunConfig,
    seed: int,
    model: Optional[Path] = None,
    table_path: Optional[Path] = None,
    out: Optional[Path] = None,
    mode: str = "conformal",
) -> Dict[str, Any]:
    zone = cfg.zone.to_zone()
    predictor = table = None
    if mode == "conformal":
        predictor = load_predictor(cfg, model)
        table = load_table(_paths(cfg, "table", table_path))
    result = run_closed_loop(seed, cfg.template.to_template(), predictor, table, zone, mode)
    out_dir = Path(out) if out is not None else Path(cfg.paths.out_dir)
    summary = result.summary()
    summary["headways"] = result.headways
    write_json(out_dir / f"run_{seed}.json", summary)
    write_text(out_dir / f"run_{seed}_plot.csv", plot_csv(result, zone))
    return summary


def cmd_batch(
    cfg: RunConfig,
    seeds: Optional[Sequence[int]] = None,
    model: Optional[Path] = None,
    table_path: Optional[Path] = None,
    out: Optional[Path] = None,
    include_oracle: bool = True,
) -> BatchReport:
    zone = cfg.zone.to_zone()
    predictor = load_predictor(cfg, model)
    table = load_table(_paths(cfg, "table", table_path))
    seeds = list(seeds) if seeds is not None else list(cfg.seeds.ranges()["evaluation"])
    report = batch_evaluate(seeds, cfg.template.to_template(), predictor, table, zone,
                            workers=cfg.workers, include_oracle=include_oracle)
    out_path = Path(out) if out is not None else Path(cfg.paths.out_dir) / "batch.json"
    doc = report.to_dict()
    doc["episodes"] = [r.summary() for r in report.runs]
    write_json(out_path, doc)
    return report


# ---------------------------------------------------------------------------
# Uploaded data (HTTP)
# ---------------------------------------------------------------------------

def coverage_from_upload(
    content: bytes,
    sidecar: Optional[bytes],
    zone: ZoneConfig,
) -> Dict[str, Any]:
    """
    Calibrate the physics baseline on every other scenario of an uploaded
    dataset and measure coverage on the rest.
    """
    doc = parse_sidecar(sidecar) if sidecar else None
    traces = parse_trajectories(content, zone, doc)
    calib_traces = traces[0::2]
    test_traces = traces[1::2]
    if not calib_traces or not test_traces:
        raise EngineError("need at least two scenarios to calibrate and test")
    predictor = PhysicsPredictor(zone)
    calib = collect_trajectories(calib_traces, per_scenario="one")
    test = collect_trajectories(test_traces, per_scenario="one")
    table = build_table(calib, predictor, zone)
    summary = coverage_summary(test, predictor, table, zone)
    summary["calibration_trajectories"] = len(calib)
    summary["scenarios"] = len(traces)
    return summary


def calibrated_batch(
    zone: ZoneConfig,
    template,
    predictor: ArrivalPredictor,
    seeds: Sequence[int],
    calibration_seeds: Sequence[int],
    include_oracle: bool = True,
    apply_monotonize: bool = False,
    workers: int = 1,
) -> BatchReport:
    """Calibrate `predictor` on freshly simulated scenarios, then run a batch."""
    calib_traces = generate_traces(calibration_seeds, template, zone)
    calib = collect_trajectories(calib_traces, per_scenario="one")
    table = build_table(calib, predictor, zone)
    if apply_monotonize:
        table = monotonize(table)
    logger.info("calibrated on %d scenarios, running %d episodes", len(calib), len(seeds))
    return batch_evaluate(list(seeds), template, predictor, table, zone,
                          workers=workers, include_oracle=include_oracle)
