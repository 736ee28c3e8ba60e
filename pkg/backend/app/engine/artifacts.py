"""
Artifact files: conformal tables, model checkpoints, reports and plot data.

    table       JSON grid, `null` for +inf, floats written with full precision
    checkpoint  .npz with format_version, predictor kind, scale and all arrays
    report      JSON (non-finite numbers become null)
    plot data   CSV, one row per step of a closed-loop run
    loss curve  CSV, one row per epoch (epoch 0 = before training)
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Sequence

import numpy as np

from .conformal import ConformalTable
from .core import EngineError, ZoneConfig
from .loop import RunResult
from .predictors.base import ArrivalPredictor, ObservationScale
from .predictors.physics import PhysicsPredictor
from .predictors.recurrent import PARAM_NAMES, CheckpointFormatError, NetParams, RecurrentPredictor


TABLE_VERSION = 1
CHECKPOINT_VERSION = 1


def jsonable(value: Any) -> Any:
    """Recursively replace non-finite floats by None and numpy scalars by Python ones."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def write_json(path: Path, doc: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(doc), indent=1, sort_keys=True, allow_nan=False), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Conformal tables
# ---------------------------------------------------------------------------

def table_to_dict(table: ConformalTable) -> Dict[str, Any]:
    return {
        "format_version": TABLE_VERSION,
        "epsilon": table.epsilon,
        "fingerprint": table.fingerprint,
        "monotonized": table.monotonized,
        "bounds": [[None if math.isinf(x) else float(x) for x in row] for row in table.bounds],
        "counts": table.counts.tolist(),
    }


def table_from_dict(doc: Dict[str, Any]) -> ConformalTable:
    if doc.get("format_version") != TABLE_VERSION:
        raise EngineError(f"unsupported table format_version {doc.get('format_version')!r}")
    bounds = np.array([[math.inf if x is None else float(x) for x in row] for row in doc["bounds"]])
    return ConformalTable(
        bounds=bounds,
        counts=np.asarray(doc["counts"], dtype=np.int64),
        epsilon=float(doc["epsilon"]),
        fingerprint=doc.get("fingerprint", ""),
        monotonized=bool(doc.get("monotonized", False)),
    )


def save_table(path: Path, table: ConformalTable) -> Path:
    return write_json(path, table_to_dict(table))


def load_table(path: Path) -> ConformalTable:
    return table_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, predictor: ArrivalPredictor) -> Path:
    """Persist a physics (no parameters) or recurrent predictor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "kind": np.array(predictor.kind),
        "num_candidates": np.array(predictor.config.num_candidates),
    }
    if isinstance(predictor, RecurrentPredictor):
        scale = predictor.scale
        arrays["scale"] = np.array([
            scale.position_scale, scale.speed_scale, math.nan if scale.anchor is None else scale.anchor,
        ])
        for name in PARAM_NAMES:
            arrays[name] = getattr(predictor.params, name)
    elif not isinstance(predictor, PhysicsPredictor):
        raise CheckpointFormatError(f"cannot checkpoint a {predictor.kind} predictor")
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: Path, config: ZoneConfig) -> ArrivalPredictor:
    """
    Restore a predictor for `config`.

    Raises:
        CheckpointFormatError: Wrong version, unknown kind, missing arrays or a
                               head count that does not match the zone.
    """
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}")
    with data:
        if "format_version" not in data or int(data["format_version"]) != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"checkpoint {path} has an unsupported format_version")
        kind = str(data["kind"])
        if int(data["num_candidates"]) != config.num_candidates:
            raise CheckpointFormatError(
                f"checkpoint has {int(data['num_candidates'])} candidates, zone has {config.num_candidates}"
            )
        if kind == "physics":
            return PhysicsPredictor(config)
        if kind != "recurrent":
            raise CheckpointFormatError(f"unknown predictor kind {kind!r}")
        missing = [n for n in PARAM_NAMES + ("scale",) if n not in data]
        if missing:
            raise CheckpointFormatError(f"checkpoint is missing {', '.join(missing)}")
        params = NetParams(**{name: data[name].copy() for name in PARAM_NAMES})
        position_scale, speed_scale, anchor = (float(x) for x in data["scale"])
    scale = ObservationScale(position_scale, speed_scale, None if math.isnan(anchor) else anchor)
    return RecurrentPredictor(config, params, scale)


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def loss_curve_csv(curve: Sequence[float]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["epoch", "loss"])
    for epoch, loss in enumerate(curve):
        writer.writerow([epoch, repr(float(loss))])
    return out.getvalue()


def plot_rows(result: RunResult, config: ZoneConfig) -> List[Dict[str, Any]]:
    """Per-step positions, speeds and planner decisions of one run."""
    trace = result.trace
    if trace is None:
        return []
    plans = {p.step: p for p in result.plans}
    rows = []
    for t in range(trace.num_steps):
        plan = plans.get(t)
        row: Dict[str, Any] = {"step": t, "time_s": round(t * config.dt, 10)}
        if trace.cav_positions is not None:
            row["cav_position"] = float(trace.cav_positions[t])
            row["cav_speed"] = float(trace.cav_speeds[t])
            row["cav_merged"] = int(trace.cav_merge_step is not None and t >= trace.cav_merge_step)
        for n in range(trace.num_hdvs):
            row[f"hdv{n}_position"] = float(trace.hdv_positions[n, t])
            row[f"hdv{n}_speed"] = float(trace.hdv_speeds[n, t])
        row["feasible"] = "" if plan is None else int(plan.feasible)
        row["candidate"] = "" if plan is None or plan.candidate is None else plan.candidate
        row["merge_time"] = "" if plan is None or plan.merge_time is None else plan.merge_time
        margin = None if plan is None else plan.margin
        row["margin"] = "" if margin is None or not math.isfinite(margin) else margin
        rows.append(row)
    return rows


def plot_csv(result: RunResult, config: ZoneConfig) -> str:
    rows = plot_rows(result, config)
    out = io.StringIO()
    if not rows:
        return ""
    writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return out.getvalue()


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
