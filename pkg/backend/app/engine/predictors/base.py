"""
Shared predictor interface.

Every arrival-time predictor is a black box with the same batch interface:

    state = predictor.begin(batch_size)
    state = predictor.step(state, raw_observations, now)     # ingest o_n(t)
    mu    = predictor.predict(state, now)                    # (B, L) absolute times

so calibration, coverage and planning never depend on which model is inside.

The base class also keeps a passage memory: once an HDV's observed position
reaches a candidate, the interpolated crossing time replaces the model output
for that candidate. A candidate already behind the first observation is
recorded at that observation's time.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from ..core import EngineError, VehicleState, ZoneConfig, interpolate_crossing
from ..hdv_sim import OBSERVATION_SIZE, ScenarioTrace


POSITION_SCALE = 100.0  # m


class NonFiniteObservationError(EngineError):
    """Raised when an observation contains NaN or infinite entries."""
    pass


class EmptyDatasetError(EngineError):
    """Raised when a dataset holds no usable trajectories."""
    pass


@dataclass(frozen=True)
class ObservationScale:
    """
    Normalization constants.

    `anchor=None` encodes the self position as exactly 0 (purely relative
    observation). A numeric anchor encodes it as (p_self - anchor) / position_scale.
    """
    position_scale: float = POSITION_SCALE
    speed_scale: float = 35.0
    anchor: Optional[float] = None

    @classmethod
    def for_zone(cls, config: ZoneConfig, anchored: bool = True) -> "ObservationScale":
        anchor = float(config.highway_targets[0]) if anchored else None
        return cls(position_scale=POSITION_SCALE, speed_scale=config.v_max, anchor=anchor)


def encode_observation(raw: Any, scale: ObservationScale) -> np.ndarray:
    """
    Normalize raw observation tuples.

    Args:
        raw:   Four VehicleStates (leader, self, follower, CAV) or an array whose
               last axis holds the 8 raw values in that order.
        scale: Normalization constants.

    Returns:
        Array with the same leading shape as `raw` and a last axis of 8:
        positions relative to self divided by position_scale, speeds divided by
        speed_scale.

    Raises:
        NonFiniteObservationError: If any input is NaN or infinite.
    """
    if isinstance(raw, (list, tuple)) and raw and isinstance(raw[0], VehicleState):
        raw = np.array([[s.position, s.speed] for s in raw], dtype=np.float64).reshape(OBSERVATION_SIZE)
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != OBSERVATION_SIZE:
        raise EngineError(f"observations must have {OBSERVATION_SIZE} entries, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw)):
        raise NonFiniteObservationError("observation contains non-finite values")

    encoded = np.empty_like(raw)
    p_self = raw[..., 2]
    for slot in range(4):
        encoded[..., 2 * slot] = (raw[..., 2 * slot] - p_self) / scale.position_scale
        encoded[..., 2 * slot + 1] = raw[..., 2 * slot + 1] / scale.speed_scale
    if scale.anchor is None:
        encoded[..., 2] = 0.0
    else:
        encoded[..., 2] = (p_self - scale.anchor) / scale.position_scale
    return encoded


@dataclass(frozen=True)
class PredictorState:
    """Model state plus passage memory for a batch of B vehicles."""
    model: Any
    latest: Optional[np.ndarray]        # (B, 8) last raw observation
    last_time: Optional[float]
    passed: np.ndarray                  # (B, L) observed past the candidate
    crossings: np.ndarray               # (B, L) recorded crossing times, NaN if unknown


class ArrivalPredictor(ABC):
    """Base class of all arrival-time predictors."""

    kind: str = "abstract"

    def __init__(self, config: ZoneConfig) -> None:
        self.config = config
        self.targets = config.highway_targets

    # -- model hooks --------------------------------------------------------

    @abstractmethod
    def _initial_model_state(self, batch: int) -> Any:
        ...

    @abstractmethod
    def _advance(self, model_state: Any, raw: np.ndarray, now: float) -> Any:
        ...

    @abstractmethod
    def _decode(self, model_state: Any, raw: np.ndarray, now: float) -> np.ndarray:
        ...

    @abstractmethod
    def _fingerprint_payload(self) -> bytes:
        ...

    # -- public interface ---------------------------------------------------

    def begin(self, batch: int) -> PredictorState:
        L = self.config.num_candidates
        return PredictorState(
            model=self._initial_model_state(batch),
            latest=None,
            last_time=None,
            passed=np.zeros((batch, L), dtype=bool),
            crossings=np.full((batch, L), np.nan),
        )

    def step(self, state: PredictorState, raw: np.ndarray, now: float) -> PredictorState:
        """Ingest one raw observation per vehicle at time `now`."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if not np.all(np.isfinite(raw)):
            raise NonFiniteObservationError("observation contains non-finite values")
        positions = raw[:, 2]
        reached = positions[:, None] >= self.targets[None, :]
        if state.latest is None:
            # already past at the first observation: pin the crossing to that time
            crossings = np.where(reached, now, state.crossings)
        else:
            prev = state.latest[:, 2][:, None]
            newly = reached & ~state.passed & (prev < self.targets[None, :])
            with np.errstate(divide="ignore", invalid="ignore"):
                t_cross = interpolate_crossing(prev, positions[:, None], state.last_time, self.config.dt, self.targets[None, :])
            crossings = np.where(newly, t_cross, state.crossings)
        return PredictorState(
            model=self._advance(state.model, raw, now),
            latest=raw,
            last_time=now,
            passed=state.passed | reached,
            crossings=crossings,
        )

    def predict(self, state: PredictorState, now: float) -> np.ndarray:
        """(B, L) absolute predicted arrival times."""
        if state.latest is None:
            raise EngineError("predict() called before any observation was ingested")
        model_out = self._decode(state.model, state.latest, now)
        observed = np.where(np.isnan(state.crossings), now, state.crossings)
        return np.where(state.passed, observed, model_out)

    def predict_series(self, raw_series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Run over full observation histories.

        Args:
            raw_series: (B, S, 8) raw observations sampled every dt from t=0.

        Returns:
            (mu, passed): (B, S, L) predictions made at each step and the
            matching observed-passage mask.
        """
        raw_series = np.asarray(raw_series, dtype=np.float64)
        B, S, _ = raw_series.shape
        L = self.config.num_candidates
        mu = np.zeros((B, S, L))
        passed = np.zeros((B, S, L), dtype=bool)
        state = self.begin(B)
        for t in range(S):
            now = t * self.config.dt
            state = self.step(state, raw_series[:, t], now)
            mu[:, t] = self.predict(state, now)
            passed[:, t] = state.passed
        return mu, passed

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.kind.encode())
        digest.update(np.asarray(self.targets, dtype=np.float64).tobytes())
        digest.update(self._fingerprint_payload())
        return digest.hexdigest()[:16]


class OraclePredictor(ArrivalPredictor):
    """Returns known arrival times; batch rows align with the supplied matrix."""

    kind = "oracle"

    def __init__(self, config: ZoneConfig, arrivals: np.ndarray) -> None:
        super().__init__(config)
        self.arrivals = np.atleast_2d(np.asarray(arrivals, dtype=np.float64))

    def _initial_model_state(self, batch: int) -> Any:
        if batch != self.arrivals.shape[0]:
            raise EngineError(f"oracle holds {self.arrivals.shape[0]} rows, batch asked for {batch}")
        return None

    def _advance(self, model_state: Any, raw: np.ndarray, now: float) -> Any:
        return None

    def _decode(self, model_state: Any, raw: np.ndarray, now: float) -> np.ndarray:
        return self.arrivals.copy()

    def _fingerprint_payload(self) -> bytes:
        return b""


# ---------------------------------------------------------------------------
# Trajectory datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryBatch:
    """
    Stacked HDV trajectories: observation histories and arrival vectors.

    Attributes:
        observations: (B, S, 8) raw observations.
        arrivals:     (B, L) ground-truth arrival times (inf = not reached).
        scenario_ids: (B,) source scenario seeds.
        vehicle_ids:  (B,) HDV index inside the scenario.
    """
    observations: np.ndarray
    arrivals: np.ndarray
    scenario_ids: np.ndarray
    vehicle_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.observations.shape[0])

    @property
    def num_steps(self) -> int:
        return int(self.observations.shape[1])

    def subset(self, index: Sequence[int]) -> "TrajectoryBatch":
        index = np.asarray(index, dtype=int)
        return TrajectoryBatch(
            observations=self.observations[index],
            arrivals=self.arrivals[index],
            scenario_ids=self.scenario_ids[index],
            vehicle_ids=self.vehicle_ids[index],
        )


def collect_trajectories(traces: Iterable[ScenarioTrace], per_scenario: str = "all") -> TrajectoryBatch:
    """
    Flatten traces into a TrajectoryBatch.

    Args:
        traces:       Simulated or ingested episodes sharing one horizon.
        per_scenario: "all" keeps every HDV (training); "one" keeps a single
                      HDV drawn from the scenario seed, so rows come from
                      independent scenarios (calibration and test sets).

    Raises:
        EmptyDatasetError: If no trajectory survives.
    """
    if per_scenario not in ("all", "one"):
        raise EngineError(f"unknown per_scenario mode {per_scenario!r}")
    obs, arr, sids, vids = [], [], [], []
    steps = None
    for trace in traces:
        if trace.num_hdvs == 0:
            continue
        if steps is None:
            steps = trace.num_steps
        elif trace.num_steps != steps:
            raise EngineError(
                f"scenario {trace.seed} has {trace.num_steps} steps, expected {steps}"
            )
        if per_scenario == "one":
            chosen = [int(np.random.default_rng(trace.seed).integers(trace.num_hdvs))]
        else:
            chosen = range(trace.num_hdvs)
        matrix = trace.arrival_matrix
        for n in chosen:
            obs.append(trace.observations[n])
            arr.append(matrix[n])
            sids.append(trace.seed)
            vids.append(n)
    if not obs:
        raise EmptyDatasetError("dataset contains no HDV trajectories")
    return TrajectoryBatch(
        observations=np.stack(obs),
        arrivals=np.stack(arr),
        scenario_ids=np.asarray(sids, dtype=np.int64),
        vehicle_ids=np.asarray(vids, dtype=np.int64),
    )


def pending_mask(batch: TrajectoryBatch, config: ZoneConfig) -> np.ndarray:
    """
    (B, S, L) cells whose candidate is reached inside the horizon but not yet
    passed at step t; the cells conformal scores and training targets live on.
    """
    positions = batch.observations[:, :, 2]
    not_passed = positions[:, :, None] < config.highway_targets[None, None, :]
    reached = np.isfinite(batch.arrivals)[:, None, :]
    return not_passed & reached
