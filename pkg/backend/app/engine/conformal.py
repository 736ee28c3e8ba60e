"""
Split Conformal Calibration

One conformal predictor per (time step t, candidate l):

    score   r_k = |tau_k^l - mu^l(s_k(t))|           over calibration trajectories k
    bound   C^l(t) = q-th smallest score,  q = ceil((K + 1)(1 - eps))
            C^l(t) = +inf when q > K
    range   [mu - C, mu + C]

A cell only contains trajectories that reach candidate l inside the horizon
and have not yet passed it at step t, so K is recorded per cell.

Coverage is measured on a disjoint test set over the same cells and reported
pooled, per step, per candidate and per cell, with Wilson intervals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .core import EngineError, ZoneConfig
from .metrics import binomial_se, wilson_interval
from .predictors.base import ArrivalPredictor, EmptyDatasetError, TrajectoryBatch, pending_mask

logger = logging.getLogger(__name__)


class EmptyCalibrationError(EngineError):
    """Raised when a conformal cell has no calibration scores."""
    pass


class FingerprintMismatchError(EngineError):
    """Raised when a table is used with a predictor it was not calibrated for."""
    pass


@dataclass(frozen=True)
class ConformalTable:
    """
    Calibrated bounds on the (step × candidate) grid.

    Attributes:
        bounds:      (S, L) non-negative seconds, +inf where uncalibrated.
        counts:      (S, L) calibration size K of each cell.
        epsilon:     Miscoverage level.
        fingerprint: Fingerprint of the predictor the scores came from.
        monotonized: True once every column was replaced by its running minimum.
    """
    bounds: np.ndarray
    counts: np.ndarray
    epsilon: float
    fingerprint: str = ""
    monotonized: bool = False

    def __post_init__(self) -> None:
        bounds = np.asarray(self.bounds, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if bounds.ndim != 2 or bounds.shape != counts.shape:
            raise EngineError("bounds and counts must be matching 2-D grids")
        if np.any(np.isnan(bounds)) or np.any(bounds < 0):
            raise EngineError("conformal bounds must be non-negative")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "counts", counts)

    @property
    def num_steps(self) -> int:
        return int(self.bounds.shape[0])

    @property
    def num_candidates(self) -> int:
        return int(self.bounds.shape[1])

    @property
    def calib_size(self) -> int:
        """Largest per-cell K."""
        return int(self.counts.max()) if self.counts.size else 0

    def row(self, step: int) -> np.ndarray:
        """C^l(t) for every candidate; steps past the grid reuse the last row."""
        return self.bounds[min(max(step, 0), self.num_steps - 1)]

    @classmethod
    def constant(cls, value: float, num_steps: int, num_candidates: int, epsilon: float = 0.1,
                 fingerprint: str = "") -> "ConformalTable":
        """A table with every entry equal to `value` (e.g. 0 or inf)."""
        shape = (num_steps, num_candidates)
        return cls(np.full(shape, float(value)), np.zeros(shape, dtype=np.int64), epsilon, fingerprint)


# ---------------------------------------------------------------------------
# Scores and bounds
# ---------------------------------------------------------------------------

def score_grid(
    calib: TrajectoryBatch,
    predictor: ArrivalPredictor,
    config: ZoneConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Residuals for every (trajectory, step, candidate).

    Returns:
        (scores, valid): (B, S, L) |tau - mu| and the mask of cells that count.
    """
    mu, _ = predictor.predict_series(calib.observations)
    valid = pending_mask(calib, config)
    with np.errstate(invalid="ignore"):
        scores = np.abs(calib.arrivals[:, None, :] - mu)
    return np.where(valid, scores, np.nan), valid


def nonconformity_scores(
    calib: TrajectoryBatch,
    predictor: ArrivalPredictor,
    config: ZoneConfig,
    step: int,
    candidate: int,
    grid: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """
    Calibration scores of one cell.

    Args:
        grid: Optional precomputed output of score_grid.

    Raises:
        EmptyCalibrationError: If no trajectory contributes to the cell.
    """
    scores, valid = grid if grid is not None else score_grid(calib, predictor, config)
    cell = scores[valid[:, step, candidate], step, candidate]
    if cell.size == 0:
        raise EmptyCalibrationError(f"no calibration trajectory for step {step}, candidate {candidate}")
    return cell


def conformal_bound(scores, epsilon: float) -> float:
    """
    q-th smallest score with q = ceil((K + 1)(1 - epsilon)); +inf if q > K.

    Raises:
        EmptyCalibrationError: If `scores` is empty.
    """
    values = np.sort(np.asarray(scores, dtype=np.float64).ravel(), kind="stable")
    K = values.size
    if K == 0:
        raise EmptyCalibrationError("conformal bound needs at least one score")
    q = math.ceil((K + 1) * (1.0 - epsilon))
    if q > K:
        return math.inf
    return float(values[q - 1])


def build_table(
    calib: TrajectoryBatch,
    predictor: ArrivalPredictor,
    config: ZoneConfig,
    epsilon: Optional[float] = None,
) -> ConformalTable:
    """
    Calibrate every (t, l) cell independently.

    Cells without any calibration trajectory get +inf and a warning.
    """
    if len(calib) == 0:
        raise EmptyDatasetError("calibration set is empty")
    eps = config.epsilon if epsilon is None else epsilon
    scores, valid = score_grid(calib, predictor, config)
    _, S, L = scores.shape

    bounds = np.full((S, L), math.inf)
    counts = valid.sum(axis=0).astype(np.int64)
    empty = 0
    for t in range(S):
        for l in range(L):
            if counts[t, l] == 0:
                empty += 1
                continue
            bounds[t, l] = conformal_bound(scores[valid[:, t, l], t, l], eps)
    if empty:
        logger.warning("%d of %d conformal cells have no calibration data (bound = inf)", empty, S * L)

    logger.info("calibrated %d trajectories, eps=%.3f, max K=%d", len(calib), eps, int(counts.max()))
    return ConformalTable(bounds, counts, eps, predictor.fingerprint())


def conformal_range(mu: float, bound: float) -> Tuple[float, float]:
    """Closed interval [mu - bound, mu + bound]; an infinite bound covers the real line."""
    if bound < 0:
        raise EngineError("conformal bound must be non-negative")
    if math.isinf(bound):
        return (-math.inf, math.inf)
    return (mu - bound, mu + bound)


def monotonize(table: ConformalTable) -> ConformalTable:
    """Replace each candidate column by its running minimum forward in time."""
    bounds = np.minimum.accumulate(table.bounds, axis=0)
    return replace(table, bounds=bounds, monotonized=True)


def check_fingerprint(table: ConformalTable, predictor: ArrivalPredictor) -> None:
    if table.fingerprint and table.fingerprint != predictor.fingerprint():
        raise FingerprintMismatchError(
            f"table was calibrated for predictor {table.fingerprint}, got {predictor.fingerprint()}"
        )


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------

@dataclass
class CoverageReport:
    """Empirical coverage of a table on a test set."""
    pooled: float
    hits: int
    total: int
    pooled_ci: Tuple[float, float]
    per_step: np.ndarray                 # (S,) NaN where a step has no cells
    per_candidate: np.ndarray            # (L,)
    per_cell: np.ndarray                 # (S, L)
    cell_counts: np.ndarray              # (S, L)
    cells_below_threshold: float         # share of populated cells below 1 - eps - 2 SE
    epsilon: float
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(arr):
            return [None if not math.isfinite(x) else round(float(x), 6) for x in np.ravel(arr)]
        return {
            "pooled": round(self.pooled, 6),
            "hits": self.hits,
            "total": self.total,
            "pooled_ci": [round(self.pooled_ci[0], 6), round(self.pooled_ci[1], 6)],
            "epsilon": self.epsilon,
            "per_step": clean(self.per_step),
            "per_candidate": clean(self.per_candidate),
            "cells_below_threshold": round(self.cells_below_threshold, 6),
            **self.extras,
        }


def evaluate_coverage(
    test: TrajectoryBatch,
    predictor: ArrivalPredictor,
    table: ConformalTable,
    config: ZoneConfig,
) -> CoverageReport:
    """
    Fraction of test cells whose true arrival lies in the conformal range.

    Raises:
        EmptyDatasetError:        If the test set has no usable cell.
        FingerprintMismatchError: If the table belongs to another predictor.
    """
    check_fingerprint(table, predictor)
    if len(test) == 0:
        raise EmptyDatasetError("test set is empty")

    mu, _ = predictor.predict_series(test.observations)
    valid = pending_mask(test, config)
    S = min(mu.shape[1], table.num_steps)
    mu, valid = mu[:, :S], valid[:, :S]
    bounds = table.bounds[:S][None, :, :]
    with np.errstate(invalid="ignore"):
        residual = np.abs(test.arrivals[:, None, :] - mu)
    hit = valid & (residual <= bounds)

    total = int(valid.sum())
    if total == 0:
        raise EmptyDatasetError("no test trajectory reaches any candidate inside the horizon")
    hits = int(hit.sum())

    def rate(h, n):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, h / np.maximum(n, 1), np.nan)

    cell_counts = valid.sum(axis=0)
    per_cell = rate(hit.sum(axis=0), cell_counts)
    target = 1.0 - table.epsilon
    populated = cell_counts > 0
    thresholds = np.array([target - 2.0 * binomial_se(target, int(n)) for n in cell_counts.ravel()])
    below = (per_cell.ravel() < thresholds) & populated.ravel()
    share_below = float(below.sum() / max(populated.sum(), 1))

    return CoverageReport(
        pooled=hits / total,
        hits=hits,
        total=total,
        pooled_ci=wilson_interval(hits, total),
        per_step=rate(hit.sum(axis=(0, 2)), valid.sum(axis=(0, 2))),
        per_candidate=rate(hit.sum(axis=(0, 1)), valid.sum(axis=(0, 1))),
        per_cell=per_cell,
        cell_counts=cell_counts,
        cells_below_threshold=share_below,
        epsilon=table.epsilon,
    )


def mean_score_trend(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(S, L) mean score per cell, NaN where a cell is empty."""
    counts = valid.sum(axis=0)
    totals = np.where(valid, scores, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
