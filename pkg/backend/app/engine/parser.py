"""
Trajectory CSV reader / writer.

One row per vehicle per step:
    scenario_id  (int)
    step         (int, 0..S-1)
    time_s       (float, step * dt)
    vehicle_id   (HDV index 0..N-1 with 0 in front, or "cav")
    role         (hdv | cav)
    lane         (highway | ramp)
    position_m   (float, in the coordinates of `lane`)
    speed_mps    (float)
    accel_mps2   (float)

Arrival sidecar (JSON):
    {"format_version": 1,
     "zone": {...},
     "splits": {"train": [ids], "calibration": [ids], "test": [ids]},
     "arrivals": {"<scenario_id>:<vehicle_id>": [L times, null = beyond horizon]}}

The same schema accepts externally converted trajectories; without a sidecar
entry the arrivals are recomputed from the position series.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ArrivalTimes, EngineError, ZoneConfig, arrival_times_from_positions
from .hdv_sim import OBSERVATION_SIZE, SENTINEL_DISTANCE, ScenarioTrace


COLUMNS = (
    "scenario_id", "step", "time_s", "vehicle_id", "role", "lane",
    "position_m", "speed_mps", "accel_mps2",
)
REQUIRED_COLUMNS = set(COLUMNS)
SIDECAR_VERSION = 1
CAV_ID = "cav"


class TrajectoryParseError(EngineError):
    """Raised when a trajectory CSV or its sidecar is invalid or malformed."""
    pass


def _num(x: float) -> str:
    return repr(float(x))


def sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".arrivals.json")


def zone_summary(config: ZoneConfig) -> Dict:
    return {
        "dt": config.dt,
        "horizon_steps": config.horizon_steps,
        "candidate_positions": list(config.candidate_positions),
        "lane_offset": config.lane_offset,
    }


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def format_traces(
    traces: Sequence[ScenarioTrace],
    config: ZoneConfig,
    splits: Optional[Dict[str, List[int]]] = None,
) -> Tuple[str, Dict]:
    """Serialize traces to (CSV text, sidecar dict)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(COLUMNS)
    arrivals: Dict[str, List[Optional[float]]] = {}

    for trace in traces:
        for t in range(trace.num_steps):
            time_s = _num(t * config.dt)
            for n in range(trace.num_hdvs):
                writer.writerow([
                    trace.seed, t, time_s, n, "hdv", "highway",
                    _num(trace.hdv_positions[n, t]), _num(trace.hdv_speeds[n, t]), _num(trace.hdv_accels[n, t]),
                ])
            if trace.cav_positions is not None:
                merged = trace.cav_merge_step is not None and t >= trace.cav_merge_step
                lane = "highway" if merged else "ramp"
                position = trace.cav_positions[t] + (config.lane_offset if merged else 0.0)
                writer.writerow([
                    trace.seed, t, time_s, CAV_ID, "cav", lane,
                    _num(position), _num(trace.cav_speeds[t]), _num(trace.cav_accels[t]),
                ])
        for n, arrival in enumerate(trace.arrivals):
            arrivals[f"{trace.seed}:{n}"] = [None if math.isinf(x) else x for x in arrival.times]

    sidecar = {
        "format_version": SIDECAR_VERSION,
        "zone": zone_summary(config),
        "splits": splits or {},
        "arrivals": arrivals,
    }
    return out.getvalue(), sidecar


def save_dataset(
    path: Path,
    traces: Sequence[ScenarioTrace],
    config: ZoneConfig,
    splits: Optional[Dict[str, List[int]]] = None,
) -> Tuple[Path, Path]:
    """Write `path` (CSV) and its arrival sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text, sidecar = format_traces(traces, config, splits)
    path.write_text(text, encoding="utf-8")
    side = sidecar_path(path)
    side.write_text(json.dumps(sidecar, indent=1, sort_keys=True), encoding="utf-8")
    return path, side


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def _observations(positions: np.ndarray, speeds: np.ndarray, cav_axis: Optional[np.ndarray],
                  cav_speeds: Optional[np.ndarray]) -> np.ndarray:
    """Rebuild (N, S, 8) raw observations from ordered HDV series."""
    N, S = positions.shape
    obs = np.zeros((N, S, OBSERVATION_SIZE))
    for n in range(N):
        p, v = positions[n], speeds[n]
        if n > 0:
            lead = (positions[n - 1], speeds[n - 1])
        else:
            lead = (p + SENTINEL_DISTANCE, v)
        if n + 1 < N:
            follow = (positions[n + 1], speeds[n + 1])
        else:
            follow = (p - SENTINEL_DISTANCE, v)
        cav = (cav_axis, cav_speeds) if cav_axis is not None else (p - SENTINEL_DISTANCE, v)
        obs[n] = np.stack([lead[0], lead[1], p, v, follow[0], follow[1], cav[0], cav[1]], axis=-1)
    return obs


def parse_trajectories(
    content: bytes,
    config: ZoneConfig,
    sidecar: Optional[Dict] = None,
) -> List[ScenarioTrace]:
    """
    Parse trajectory CSV bytes into ScenarioTraces (ordered by scenario id).

    Raises:
        TrajectoryParseError: On encoding problems, missing columns, malformed
                              rows, gaps in the step index or inconsistent times.
    """
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError:
        raise TrajectoryParseError("File is not valid UTF-8 encoded text.")

    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise TrajectoryParseError("CSV file is empty or has no header row.")
    cleaned = [f.strip().lower() for f in reader.fieldnames]
    missing = REQUIRED_COLUMNS - set(cleaned)
    if missing:
        raise TrajectoryParseError(f"Missing required columns: {', '.join(sorted(missing))}")
    col_map = {c: o for o, c in zip(reader.fieldnames, cleaned) if c in REQUIRED_COLUMNS}

    # scenario -> vehicle -> step -> (position, speed, accel, lane)
    rows: Dict[int, Dict[str, Dict[int, Tuple[float, float, float, str]]]] = defaultdict(lambda: defaultdict(dict))
    for line_num, row in enumerate(reader, start=2):
        try:
            sid = int(row[col_map["scenario_id"]])
            step = int(row[col_map["step"]])
            time_s = float(row[col_map["time_s"]])
            vid = row[col_map["vehicle_id"]].strip().lower()
            role = row[col_map["role"]].strip().lower()
            lane = row[col_map["lane"]].strip().lower()
            values = tuple(float(row[col_map[c]]) for c in ("position_m", "speed_mps", "accel_mps2"))
        except (ValueError, TypeError, AttributeError) as exc:
            raise TrajectoryParseError(f"line {line_num}: {exc}")
        if role not in ("hdv", "cav") or lane not in ("highway", "ramp"):
            raise TrajectoryParseError(f"line {line_num}: unknown role/lane {role!r}/{lane!r}")
        if abs(time_s - step * config.dt) > 1e-6:
            raise TrajectoryParseError(f"line {line_num}: time_s {time_s} does not match step {step}")
        if not all(math.isfinite(x) for x in values):
            raise TrajectoryParseError(f"line {line_num}: non-finite value")
        key = CAV_ID if role == "cav" else vid
        if step in rows[sid][key]:
            raise TrajectoryParseError(f"line {line_num}: duplicate step {step} for vehicle {vid}")
        rows[sid][key][step] = values + (lane,)

    arrivals_doc = (sidecar or {}).get("arrivals", {})
    traces: List[ScenarioTrace] = []
    for sid in sorted(rows):
        vehicles = rows[sid]
        hdv_ids = sorted((v for v in vehicles if v != CAV_ID), key=lambda v: int(v) if v.isdigit() else v)
        steps = {len(s) for s in vehicles.values()}
        if len(steps) != 1:
            raise TrajectoryParseError(f"scenario {sid}: vehicles have different numbers of steps")
        S = steps.pop()
        for vid, series in vehicles.items():
            if sorted(series) != list(range(S)):
                raise TrajectoryParseError(f"scenario {sid}, vehicle {vid}: steps must be 0..{S - 1}")

        def column(vid: str, k: int) -> np.ndarray:
            return np.array([vehicles[vid][t][k] for t in range(S)], dtype=np.float64)

        positions = np.stack([column(v, 0) for v in hdv_ids]) if hdv_ids else np.zeros((0, S))
        speeds = np.stack([column(v, 1) for v in hdv_ids]) if hdv_ids else np.zeros((0, S))
        accels = np.stack([column(v, 2) for v in hdv_ids]) if hdv_ids else np.zeros((0, S))

        cav_pos = cav_spd = cav_acc = None
        merge_step = None
        if CAV_ID in vehicles:
            cav_rows = vehicles[CAV_ID]
            on_highway = [cav_rows[t][3] == "highway" for t in range(S)]
            if any(on_highway):
                merge_step = on_highway.index(True)
            cav_pos = np.array([
                cav_rows[t][0] - (config.lane_offset if on_highway[t] else 0.0) for t in range(S)
            ])
            cav_spd, cav_acc = column(CAV_ID, 1), column(CAV_ID, 2)

        arrivals = []
        for n, vid in enumerate(hdv_ids):
            stored = arrivals_doc.get(f"{sid}:{vid}")
            if stored is not None:
                if len(stored) != config.num_candidates:
                    raise TrajectoryParseError(f"sidecar entry {sid}:{vid} has {len(stored)} arrivals")
                arrivals.append(ArrivalTimes(tuple(math.inf if x is None else float(x) for x in stored)))
            else:
                try:
                    arrivals.append(arrival_times_from_positions(positions[n], config))
                except EngineError as exc:
                    raise TrajectoryParseError(f"scenario {sid}, vehicle {vid}: {exc}")

        cav_axis = None if cav_pos is None else cav_pos + config.lane_offset
        traces.append(ScenarioTrace(
            seed=sid,
            config=config,
            hdv_positions=positions,
            hdv_speeds=speeds,
            hdv_accels=accels,
            observations=_observations(positions, speeds, cav_axis, cav_spd),
            arrivals=tuple(arrivals),
            cav_positions=cav_pos,
            cav_speeds=cav_spd,
            cav_accels=cav_acc,
            cav_merge_step=merge_step,
        ))
    return traces


def parse_sidecar(content: bytes) -> Dict:
    try:
        doc = json.loads(content.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TrajectoryParseError(f"arrival sidecar is not valid JSON: {exc}")
    if not isinstance(doc, dict) or doc.get("format_version") != SIDECAR_VERSION:
        raise TrajectoryParseError(f"arrival sidecar must have format_version {SIDECAR_VERSION}")
    return doc


def load_dataset(path: Path, config: ZoneConfig) -> Tuple[List[ScenarioTrace], Dict[str, List[int]]]:
    """Read a CSV and (if present) its sidecar; returns (traces, splits)."""
    path = Path(path)
    side = sidecar_path(path)
    sidecar = parse_sidecar(side.read_bytes()) if side.exists() else None
    if sidecar is not None:
        zone = sidecar.get("zone", {})
        stored = zone.get("candidate_positions", list(config.candidate_positions))
        if zone and (
            len(stored) != config.num_candidates
            or not np.allclose(stored, config.candidate_positions)
            or not math.isclose(zone.get("dt", config.dt), config.dt)
            or not math.isclose(zone.get("lane_offset", config.lane_offset), config.lane_offset)
        ):
            raise TrajectoryParseError(f"{path.name} was generated for a different control zone")
    traces = parse_trajectories(path.read_bytes(), config, sidecar)
    splits = {k: [int(s) for s in v] for k, v in (sidecar or {}).get("splits", {}).items()}
    return traces, splits
