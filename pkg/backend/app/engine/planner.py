"""
Merge Planner

Finds the earliest merge the CAV can certify:

    minimize   T^m
    over       merge time T^m, merge speed v^m, candidate l
    subject to cubic trajectory with p(0)=0, v(0)=v0, p(T^m)=p_l, v(T^m)=v^m
               v_min ≤ v(t) ≤ v_max and u_min ≤ u(t) ≤ u_max on [0, T^m]
               |mu_n^l - T^m| > delta + C^l(t)    for every HDV n

The headway constraint turns each candidate's time axis into a union of
forbidden intervals, so an optimum sits on the dt grid or just past the upper
end of a forbidden interval. Candidate times are scanned in ascending order and
at each time every (candidate, merge speed) pair is checked at once with the
closed-form extrema of the cubic.

Both problems use closed forbidden intervals, so a strict headway holds at
every certified merge. Problem 1 (oracle) is the same search with C ≡ 0 and
true arrival times.

Infeasibility is returned as None; the caller applies fallback_accel().
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import (
    FEASIBILITY_TOL,
    ArrivalTimes,
    CubicCoeffs,
    VehicleState,
    ZoneConfig,
    boundary_coeffs,
    extremes_arrays,
)


Interval = Tuple[float, float]


@dataclass(frozen=True)
class MergePlan:
    """
    A certified merge, in time shifted so the planning instant is t = 0.

    Attributes:
        psi:          Cubic coefficients of the ramp trajectory.
        merge_time:   T^m (s after the planning instant).
        merge_speed:  v^m (m/s).
        candidate:    0-based candidate index.
        margin:       Smallest |mu - T^m| - (delta + C) over HDVs (inf without HDVs).
    """
    psi: CubicCoeffs
    merge_time: float
    merge_speed: float
    candidate: int
    margin: float

    @property
    def first_accel(self) -> float:
        """Acceleration commanded at the planning instant (6a*0 + 2b)."""
        return 2.0 * self.psi.b


@dataclass(frozen=True, eq=False)
class ForbiddenSet:
    """
    Per-candidate merged, disjoint forbidden intervals of merge times.

    Attributes:
        intervals:   One tuple of (lo, hi) pairs per candidate, sorted.
        closed:      True if endpoints are forbidden too (strict headway).
        centers:     (N, L) arrival times the intervals were built from.
        half_widths: (N, L) delta + C per HDV and candidate.
    """
    intervals: Tuple[Tuple[Interval, ...], ...]
    closed: bool = False
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    half_widths: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def num_candidates(self) -> int:
        return len(self.intervals)

    def contains(self, candidate: int, T: float) -> bool:
        for lo, hi in self.intervals[candidate]:
            if self.closed:
                if lo <= T <= hi:
                    return True
            elif lo < T < hi:
                return True
        return False

    def upper_endpoints(self, candidate: int) -> List[float]:
        return [hi for _, hi in self.intervals[candidate] if math.isfinite(hi)]

    def margin(self, candidate: int, T: float) -> float:
        """Smallest |center - T| - half_width at this candidate; inf if no HDV."""
        if self.centers.size == 0:
            return math.inf
        centers = self.centers[:, candidate]
        half = self.half_widths[:, candidate]
        keep = np.isfinite(centers)
        if not keep.any():
            return math.inf
        with np.errstate(invalid="ignore"):
            gaps = np.abs(centers[keep] - T) - half[keep]
        return float(np.min(np.where(np.isnan(gaps), -math.inf, gaps)))


def _merge(intervals: List[Interval], closed: bool) -> Tuple[Interval, ...]:
    merged: List[List[float]] = []
    for lo, hi in sorted(intervals):
        if merged and (lo < merged[-1][1] or (closed and lo <= merged[-1][1])):
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((lo, hi) for lo, hi in merged)


def forbidden_intervals(
    predictions,
    table_row,
    delta: float,
    passed: Optional[np.ndarray] = None,
    closed: bool = False,
) -> ForbiddenSet:
    """
    Union over HDVs of (mu - delta - C, mu + delta + C) per candidate.

    Args:
        predictions: (N, L) arrival times, relative to the planning instant.
                     Non-finite entries (never arrives) are ignored.
        table_row:   (L,) conformal bounds C^l at the current step.
        delta:       Required headway (s).
        passed:      Optional (N, L) mask of observed passages; those entries
                     use C = 0 (the prediction is the recorded actual).
        closed:      Build closed intervals (strict headway constraint).

    Returns:
        ForbiddenSet; an infinite bound forbids the whole axis of its candidate.
    """
    table_row = np.asarray(table_row, dtype=np.float64)
    L = table_row.shape[0]
    centers = np.asarray(predictions, dtype=np.float64).reshape(-1, L)
    bounds = np.broadcast_to(table_row, centers.shape)
    if passed is not None:
        bounds = np.where(np.asarray(passed, dtype=bool).reshape(centers.shape), 0.0, bounds)
    half = delta + bounds

    per_candidate = []
    for l in range(L):
        spans = []
        for n in range(centers.shape[0]):
            mu = centers[n, l]
            if not math.isfinite(mu):
                continue
            if math.isinf(half[n, l]):
                spans.append((-math.inf, math.inf))
            else:
                spans.append((mu - half[n, l], mu + half[n, l]))
        per_candidate.append(_merge(spans, closed))
    return ForbiddenSet(tuple(per_candidate), closed, centers, np.asarray(half))


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def merge_speed_grid(config: ZoneConfig) -> np.ndarray:
    """v_min, v_min + res, ..., v_max (v_max always included)."""
    res = config.merge_speed_resolution
    count = int(math.floor((config.v_max - config.v_min) / res + 1e-9)) + 1
    grid = config.v_min + res * np.arange(count)
    if grid[-1] < config.v_max - 1e-9:
        grid = np.append(grid, config.v_max)
    return grid


def _feasible_mask(v0: float, p_m, v_m, T, config: ZoneConfig) -> np.ndarray:
    a, b, c, _ = boundary_coeffs(v0, p_m, v_m, T)
    v_lo, v_hi, u_lo, u_hi = extremes_arrays(a, b, c, T)
    tol = FEASIBILITY_TOL
    return (
        (v_lo >= config.v_min - tol)
        & (v_hi <= config.v_max + tol)
        & (u_lo >= config.u_min - tol)
        & (u_hi <= config.u_max + tol)
    )


def kinematic_feasible(v0: float, p_m: float, T_m: float, v_m: float, config: ZoneConfig) -> bool:
    """True iff the boundary-condition cubic respects every speed and acceleration limit."""
    if not T_m > 0:
        return False
    return bool(_feasible_mask(v0, p_m, v_m, T_m, config))


def candidate_merge_times(
    distance: float,
    config: ZoneConfig,
    forbidden: ForbiddenSet,
    candidate: int,
    max_time: float,
    incumbent: Optional[float] = None,
) -> List[float]:
    """
    Merge times worth testing for one candidate, ascending.

    dt multiples from the kinematic lower bound distance / v_max up to
    `max_time`, nudged upper ends of forbidden intervals, and the incumbent.
    """
    dt = config.dt
    lower = max(distance / config.v_max, dt)
    times = set()
    k_lo = max(int(math.ceil(lower / dt - 1e-9)), 1)
    k_hi = int(math.floor(max_time / dt + 1e-9))
    for k in range(k_lo, k_hi + 1):
        times.add(k * dt)
    nudge = dt * config.endpoint_nudge
    for hi in forbidden.upper_endpoints(candidate):
        T = hi + nudge
        if lower <= T <= max_time:
            times.add(T)
    # the incumbent may fall below one step when a merge is imminent
    if incumbent is not None and 0.0 < incumbent <= max_time:
        times.add(float(incumbent))
    return sorted(times)


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def _search(
    cav: VehicleState,
    forbidden: ForbiddenSet,
    config: ZoneConfig,
    max_time: Optional[float],
    incumbent: Optional[float],
) -> Optional[MergePlan]:
    max_time = config.horizon_time if max_time is None else max_time
    speeds = merge_speed_grid(config)

    per_time: dict = {}
    distances = np.asarray(config.candidate_positions) - cav.position
    for l, distance in enumerate(distances):
        if distance <= 0:
            continue
        for T in candidate_merge_times(distance, config, forbidden, l, max_time, incumbent):
            per_time.setdefault(T, []).append(l)

    for T in sorted(per_time):
        options = []
        for l in per_time[T]:
            if forbidden.contains(l, T):
                continue
            ok = _feasible_mask(cav.speed, distances[l], speeds, T, config)
            if not ok.any():
                continue
            margin = forbidden.margin(l, T)
            options.append((margin, l, float(speeds[ok].max())))
        if options:
            margin, l, v_m = min(options, key=lambda o: (-o[0], o[1], -o[2]))
            a, b, c, d = boundary_coeffs(cav.speed, distances[l], v_m, T)
            psi = CubicCoeffs(float(a), float(b), float(c), float(d))
            return MergePlan(psi=psi, merge_time=float(T), merge_speed=v_m, candidate=int(l), margin=margin)
    return None


def solve_problem2(
    cav: VehicleState,
    predictions,
    table_row,
    config: ZoneConfig,
    now: float = 0.0,
    passed: Optional[np.ndarray] = None,
    max_time: Optional[float] = None,
    incumbent: Optional[float] = None,
) -> Optional[MergePlan]:
    """
    Minimum-time merge under conformal-inflated headway constraints.

    Args:
        cav:         CAV state in ramp coordinates.
        predictions: (N, L) absolute predicted arrival times.
        table_row:   (L,) conformal bounds at the current step.
        config:      Zone geometry and limits.
        now:         Current absolute time; predictions are shifted by it.
        passed:      (N, L) observed passages (C = 0 for those entries).
        max_time:    Latest admissible merge time (defaults to the horizon).
        incumbent:   Previous plan's merge time shifted to now; always tested.

    Returns:
        The optimal MergePlan, or None if no combination is feasible.
    """
    relative = np.asarray(predictions, dtype=np.float64) - now
    forbidden = forbidden_intervals(relative, table_row, config.headway_delta, passed, closed=True)
    return _search(cav, forbidden, config, max_time, incumbent)


def solve_problem1_oracle(
    cav: VehicleState,
    true_arrivals,
    config: ZoneConfig,
    now: float = 0.0,
    max_time: Optional[float] = None,
    incumbent: Optional[float] = None,
) -> Optional[MergePlan]:
    """Problem 1: true arrival times, no conformal inflation, strict headway."""
    if isinstance(true_arrivals, (list, tuple)) and true_arrivals and isinstance(true_arrivals[0], ArrivalTimes):
        true_arrivals = np.stack([a.as_array() for a in true_arrivals])
    L = config.num_candidates
    arrivals = np.asarray(true_arrivals, dtype=np.float64).reshape(-1, L) - now
    forbidden = forbidden_intervals(arrivals, np.zeros(L), config.headway_delta, closed=True)
    return _search(cav, forbidden, config, max_time, incumbent)


def fallback_accel(cav: VehicleState, config: ZoneConfig) -> float:
    """Comfortable deceleration hold that never drops below v_min."""
    u = max(config.u_min / 2.0, (config.v_min - cav.speed) / config.dt)
    return min(u, config.u_max)


def verify_plan(plan: MergePlan, cav: VehicleState, forbidden: ForbiddenSet, config: ZoneConfig) -> bool:
    """Post-hoc check: boundary conditions, kinematic limits and headway margin."""
    distance = config.candidate_positions[plan.candidate] - cav.position
    if not kinematic_feasible(cav.speed, distance, plan.merge_time, plan.merge_speed, config):
        return False
    if forbidden.contains(plan.candidate, plan.merge_time):
        return False
    return forbidden.margin(plan.candidate, plan.merge_time) >= -FEASIBILITY_TOL
