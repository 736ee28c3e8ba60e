"""
Statistics helpers for coverage and safety reports.

    - Wilson score intervals for hit / violation rates (scipy binomtest)
    - binomial standard error and the Monte-Carlo violation threshold
          eps + z * sqrt(eps * (1 - eps) / n)
    - Spearman rank trend of a per-step series (scipy spearmanr)
"""

from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
from scipy import stats


# Two-sided 95% normal quantile
Z_95 = 1.96

# Level of every reported confidence interval
CONFIDENCE_LEVEL = 0.95


def wilson_interval(successes: int, trials: int, confidence: float = CONFIDENCE_LEVEL) -> Tuple[float, float]:
    """
    Wilson score interval for a binomial proportion.

    Returns (0.0, 1.0) when there are no trials.
    """
    if trials <= 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(
        confidence_level=confidence, method="wilson"
    )
    return (float(ci.low), float(ci.high))


def binomial_se(p: float, n: int) -> float:
    """Standard error of an empirical proportion."""
    if n <= 0:
        return math.inf
    return math.sqrt(p * (1.0 - p) / n)


def violation_threshold(epsilon: float, runs: int, z: float = Z_95) -> float:
    """Largest violation rate consistent with a per-episode rate of epsilon."""
    return epsilon + z * binomial_se(epsilon, runs)


def spearman_trend(values: Sequence[float]) -> Tuple[float, float]:
    """
    Rank correlation of `values` against their index, ignoring non-finite entries.

    Returns:
        (rho, p_value); (nan, nan) when fewer than three finite points exist.
    """
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(y.size)
    keep = np.isfinite(y)
    if keep.sum() < 3:
        return (math.nan, math.nan)
    result = stats.spearmanr(x[keep], y[keep])
    return (float(result.statistic), float(result.pvalue))


def percentiles(values: Sequence[float], qs: Sequence[float] = (5, 50, 95)) -> dict:
    """Named percentiles (`p5`, `p50`, ...) of the finite values; empty dict if none."""
    arr = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {}
    return {f"p{int(q)}": round(float(np.percentile(arr, q)), 4) for q in qs}
