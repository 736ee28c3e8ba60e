"""
Control-zone geometry and trajectory algebra.

Shared by every engine module:
    - VehicleState / ZoneConfig / CubicCoeffs / ArrivalTimes value types
    - cubic (energy-optimal form) evaluation, boundary-condition solve, exact extrema
    - ground-truth arrival times from a sampled position series

Conventions:
    - HDV positions are measured in the highway lane, the CAV's in the ramp lane.
      A merging candidate at p_m (ramp coordinates) sits at p_m + lane_offset
      in highway coordinates.
    - Planning always shifts the current instant to t = 0 with p_c(0) = 0.
    - Arrivals never reached inside the horizon are `inf`.

All helpers accept scalars or numpy arrays (broadcasting), so the planner's
vectorized search and the scalar checks share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np


# Shared constants
DEFAULT_DT = 0.1
VEHICLE_LENGTH = 5.0      # m, same for every vehicle
FEASIBILITY_TOL = 1e-9    # slack on speed/accel limit comparisons


class EngineError(ValueError):
    """Base class for all engine-level validation errors."""
    pass


class InvalidConfigError(EngineError):
    """Raised when a ZoneConfig violates its invariants."""
    pass


class DegenerateHorizonError(EngineError):
    """Raised when a merge horizon is shorter than one sampling step."""
    pass


class NonMonotoneSeriesError(EngineError):
    """Raised when a position series is not strictly increasing."""
    pass


@dataclass(frozen=True)
class VehicleState:
    """Longitudinal state of one vehicle at one step."""
    position: float  # m
    speed: float     # m/s


@dataclass(frozen=True)
class ZoneConfig:
    """
    Control-zone geometry, CAV limits and the target confidence.

    Attributes:
        dt:                     Sampling time (s).
        horizon_steps:          T, the last step index of an episode.
        candidate_positions:    Merging candidates p^{m,l} in ramp coordinates (m).
        headway_delta:          Required time headway delta (s).
        v_min, v_max:           CAV speed limits (m/s).
        u_min, u_max:           CAV acceleration limits (m/s^2).
        epsilon:                Miscoverage level of the conformal bounds.
        lane_offset:            Ramp → highway coordinate shift (m).
        merge_speed_resolution: Grid step of the merge-speed search (m/s).
        endpoint_nudge:         Fraction of dt added past forbidden-interval ends.
    """
    dt: float = DEFAULT_DT
    horizon_steps: int = 150
    candidate_positions: Tuple[float, ...] = tuple(100.0 + 10.0 * i for i in range(10))
    headway_delta: float = 1.0
    v_min: float = 5.0
    v_max: float = 35.0
    u_min: float = -4.0
    u_max: float = 3.0
    epsilon: float = 0.1
    lane_offset: float = 0.0
    merge_speed_resolution: float = 0.25
    endpoint_nudge: float = 1e-3

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidate_positions", tuple(float(p) for p in self.candidate_positions))
        if self.dt <= 0:
            raise InvalidConfigError("dt must be positive")
        if self.horizon_steps < 1:
            raise InvalidConfigError("horizon_steps must be at least 1")
        if not 0 < self.v_min <= self.v_max:
            raise InvalidConfigError("speed limits must satisfy 0 < v_min <= v_max")
        if not self.u_min < 0 < self.u_max:
            raise InvalidConfigError("acceleration limits must satisfy u_min < 0 < u_max")
        if not 0 < self.epsilon < 1:
            raise InvalidConfigError("epsilon must lie in (0, 1)")
        if self.headway_delta < 0:
            raise InvalidConfigError("headway_delta must be non-negative")
        if self.merge_speed_resolution <= 0:
            raise InvalidConfigError("merge_speed_resolution must be positive")
        positions = self.candidate_positions
        if not positions:
            raise InvalidConfigError("at least one merging candidate is required")
        gaps = np.diff(positions)
        if np.any(gaps <= 0):
            raise InvalidConfigError("candidate positions must be strictly increasing")
        if gaps.size and not np.allclose(gaps, gaps[0], rtol=0.0, atol=1e-9):
            raise InvalidConfigError("candidate positions must be equally spaced")

    @classmethod
    def evenly_spaced(cls, first: float = 100.0, spacing: float = 10.0, count: int = 10, **kwargs) -> "ZoneConfig":
        """Build a zone whose candidates sit at first + spacing * l."""
        return cls(candidate_positions=tuple(first + spacing * i for i in range(count)), **kwargs)

    @property
    def num_candidates(self) -> int:
        return len(self.candidate_positions)

    @property
    def horizon_time(self) -> float:
        return self.horizon_steps * self.dt

    @property
    def highway_targets(self) -> np.ndarray:
        """Candidate positions expressed in highway-lane coordinates."""
        return np.asarray(self.candidate_positions, dtype=np.float64) + self.lane_offset


@dataclass(frozen=True)
class CubicCoeffs:
    """psi = (a, b, c, d) of p(t) = a t^3 + b t^2 + c t + d."""
    a: float
    b: float
    c: float
    d: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)


@dataclass(frozen=True)
class ArrivalTimes:
    """Arrival times of one vehicle at each candidate; `inf` = beyond horizon."""
    times: Tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        finite = [t for t in times if math.isfinite(t)]
        if any(b < a for a, b in zip(finite, finite[1:])):
            raise EngineError("finite arrival times must be non-decreasing in candidate order")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=np.float64)

    @property
    def reached(self) -> np.ndarray:
        return np.isfinite(self.as_array())


# ---------------------------------------------------------------------------
# Trajectory algebra
# ---------------------------------------------------------------------------

def eval_trajectory(psi: CubicCoeffs, t):
    """Position, speed and acceleration of the cubic at time(s) t."""
    a, b, c, d = psi.as_tuple()
    t = np.asarray(t, dtype=np.float64) if not np.isscalar(t) else float(t)
    position = ((a * t + b) * t + c) * t + d
    speed = (3.0 * a * t + 2.0 * b) * t + c
    accel = 6.0 * a * t + 2.0 * b
    return position, speed, accel


def boundary_coeffs(v0, p_m, v_m, T_m):
    """
    Array form of solve_boundary_coeffs: returns (a, b, c, d) arrays.

    Solves a T^3 + b T^2 = p_m - v0 T and 3a T^2 + 2b T = v_m - v0 in closed form.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    p_m = np.asarray(p_m, dtype=np.float64)
    v_m = np.asarray(v_m, dtype=np.float64)
    T = np.asarray(T_m, dtype=np.float64)
    dist = p_m - v0 * T
    dvel = v_m - v0
    a = (dvel * T - 2.0 * dist) / T**3
    b = (3.0 * dist - dvel * T) / T**2
    return a, b, v0 + 0.0 * a, np.zeros_like(a)


def solve_boundary_coeffs(v0: float, p_m: float, v_m: float, T_m: float, dt: float = DEFAULT_DT) -> CubicCoeffs:
    """
    Cubic through p(0)=0, v(0)=v0, p(T_m)=p_m, v(T_m)=v_m.

    Raises:
        DegenerateHorizonError: If T_m is shorter than one sampling step.
    """
    if not T_m >= dt:
        raise DegenerateHorizonError(f"merge horizon {T_m!r} s is below one step ({dt} s)")
    a, b, c, d = boundary_coeffs(v0, p_m, v_m, T_m)
    return CubicCoeffs(float(a), float(b), float(c), float(d))


def extremes_arrays(a, b, c, T_m):
    """Array form of trajectory_extremes over coefficient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    T = np.asarray(T_m, dtype=np.float64)

    v_start = c
    v_end = (3.0 * a * T + 2.0 * b) * T + c
    v_lo = np.minimum(v_start, v_end)
    v_hi = np.maximum(v_start, v_end)

    # Interior vertex of the speed parabola
    nonzero = a != 0.0
    safe_a = np.where(nonzero, a, 1.0)
    t_star = -b / (3.0 * safe_a)
    inside = nonzero & (t_star > 0.0) & (t_star < T)
    v_star = (3.0 * safe_a * t_star + 2.0 * b) * t_star + c
    v_lo = np.where(inside, np.minimum(v_lo, v_star), v_lo)
    v_hi = np.where(inside, np.maximum(v_hi, v_star), v_hi)

    u_start = 2.0 * b
    u_end = 6.0 * a * T + 2.0 * b
    return v_lo, v_hi, np.minimum(u_start, u_end), np.maximum(u_start, u_end)


def trajectory_extremes(psi: CubicCoeffs, T_m: float) -> Tuple[float, float, float, float]:
    """Exact (v_lo, v_hi, u_lo, u_hi) of the cubic over [0, T_m]."""
    v_lo, v_hi, u_lo, u_hi = extremes_arrays(psi.a, psi.b, psi.c, T_m)
    return float(v_lo), float(v_hi), float(u_lo), float(u_hi)


# ---------------------------------------------------------------------------
# Arrival times
# ---------------------------------------------------------------------------

def interpolate_crossing(p_prev, p_cur, t_prev, dt, target):
    """Linear-interpolated time at which a segment p_prev → p_cur meets target."""
    return t_prev + dt * (target - p_prev) / (p_cur - p_prev)


def arrival_times_from_positions(
    positions: Sequence[float],
    config: ZoneConfig,
    lane_offset: float | None = None,
    t0: float = 0.0,
) -> ArrivalTimes:
    """
    Ground-truth crossing time of each candidate for one vehicle.

    Args:
        positions:   Position series sampled every config.dt, starting at t0.
        config:      Zone geometry.
        lane_offset: Ramp → vehicle-lane shift; defaults to config.lane_offset.
        t0:          Time of the first sample.

    Returns:
        ArrivalTimes with `inf` for candidates never crossed. A candidate already
        behind the first sample is extrapolated backward along the first segment.

    Raises:
        NonMonotoneSeriesError: If positions are not strictly increasing.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise NonMonotoneSeriesError("position series must be a non-empty 1-D sequence")
    if p.size > 1 and np.any(np.diff(p) <= 0):
        raise NonMonotoneSeriesError("position series must be strictly increasing")
    offset = config.lane_offset if lane_offset is None else lane_offset
    targets = np.asarray(config.candidate_positions, dtype=np.float64) + offset

    times = []
    for target in targets:
        idx = int(np.searchsorted(p, target, side="left"))
        if idx >= p.size:
            times.append(math.inf)
        elif idx == 0:
            if p[0] == target or p.size == 1:
                times.append(t0 if p[0] == target else math.inf)
            else:
                times.append(float(interpolate_crossing(p[0], p[1], t0, config.dt, target)))
        else:
            times.append(float(interpolate_crossing(p[idx - 1], p[idx], t0 + (idx - 1) * config.dt, config.dt, target)))
    return ArrivalTimes(tuple(times))
