import math

import numpy as np
import pytest

from backend.app.engine.core import (
    ArrivalTimes,
    CubicCoeffs,
    DegenerateHorizonError,
    EngineError,
    InvalidConfigError,
    NonMonotoneSeriesError,
    ZoneConfig,
    arrival_times_from_positions,
    boundary_coeffs,
    eval_trajectory,
    extremes_arrays,
    solve_boundary_coeffs,
    trajectory_extremes,
)


def _random_boundaries(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    v0 = rng.uniform(5.0, 35.0, n)
    v_m = rng.uniform(5.0, 35.0, n)
    T = rng.uniform(0.5, 15.0, n)
    p_m = rng.uniform(1.0, 200.0, n)
    return v0, p_m, v_m, T


def test_boundary_conditions_reproduced():
    v0, p_m, v_m, T = _random_boundaries(100_000)
    a, b, c, d = boundary_coeffs(v0, p_m, v_m, T)
    psi = CubicCoeffs(a, b, c, d)
    p0, s0, _ = eval_trajectory(psi, np.zeros_like(T))
    pT, sT, _ = eval_trajectory(psi, T)

    np.testing.assert_allclose(p0, 0.0, atol=1e-12)
    np.testing.assert_allclose(s0, v0, rtol=1e-9)
    np.testing.assert_allclose(pT, p_m, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(sT, v_m, rtol=1e-9, atol=1e-9)


def test_extremes_bound_dense_samples():
    v0, p_m, v_m, T = _random_boundaries(2000, seed=1)
    a, b, c, _ = boundary_coeffs(v0, p_m, v_m, T)
    v_lo, v_hi, u_lo, u_hi = extremes_arrays(a, b, c, T)

    frac = np.linspace(0.0, 1.0, 2001)
    t = T[:, None] * frac[None, :]
    speed = (3.0 * a[:, None] * t + 2.0 * b[:, None]) * t + c[:, None]
    accel = 6.0 * a[:, None] * t + 2.0 * b[:, None]
    h = T / 2000.0
    slack = 3.0 * np.abs(a) * (h / 2.0) ** 2 + 1e-9

    # the exact extrema enclose every sample and are no further than the grid error
    assert np.all(v_lo <= speed.min(axis=1) + 1e-9)
    assert np.all(v_hi >= speed.max(axis=1) - 1e-9)
    assert np.all(speed.min(axis=1) - v_lo <= slack)
    assert np.all(v_hi - speed.max(axis=1) <= slack)
    # acceleration is linear, so the endpoints are exact
    np.testing.assert_allclose(u_lo, accel.min(axis=1), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(u_hi, accel.max(axis=1), rtol=1e-9, atol=1e-9)


def test_trajectory_extremes_interior_vertex():
    # v(t) = 3t^2 - 6t + 10 has its minimum 7 at t = 1
    psi = CubicCoeffs(1.0, -3.0, 10.0, 0.0)
    v_lo, v_hi, u_lo, u_hi = trajectory_extremes(psi, 3.0)
    assert v_lo == pytest.approx(7.0)
    assert v_hi == pytest.approx(19.0)
    assert u_lo == pytest.approx(-6.0)
    assert u_hi == pytest.approx(12.0)


def test_constant_speed_solution_is_linear():
    psi = solve_boundary_coeffs(v0=20.0, p_m=80.0, v_m=20.0, T_m=4.0)
    assert psi.a == pytest.approx(0.0, abs=1e-12)
    assert psi.b == pytest.approx(0.0, abs=1e-12)
    assert psi.c == 20.0


def test_degenerate_horizon_rejected():
    with pytest.raises(DegenerateHorizonError):
        solve_boundary_coeffs(20.0, 10.0, 20.0, 0.05, dt=0.1)


def test_arrivals_of_linear_motion():
    config = ZoneConfig()
    positions = 10.0 + 20.0 * config.dt * np.arange(config.horizon_steps + 1)
    arrivals = arrival_times_from_positions(positions, config)
    expected = [(p - 10.0) / 20.0 for p in config.candidate_positions]
    np.testing.assert_allclose(arrivals.as_array(), expected, rtol=1e-12)


def test_arrivals_beyond_horizon_are_inf():
    config = ZoneConfig()
    positions = 50.0 + 5.0 * config.dt * np.arange(config.horizon_steps + 1)
    arrivals = arrival_times_from_positions(positions, config)
    times = arrivals.as_array()
    # 50 + 5 * 15 s = 125 m: candidates at 100..120 reached, the rest not
    assert np.all(np.isfinite(times[:3]))
    assert np.all(np.isinf(times[3:]))
    assert list(arrivals.reached) == [True] * 3 + [False] * 7


def test_arrivals_honour_lane_offset():
    config = ZoneConfig(lane_offset=5.0)
    positions = 20.0 * config.dt * np.arange(config.horizon_steps + 1)
    arrivals = arrival_times_from_positions(positions, config)
    assert arrivals.times[0] == pytest.approx(105.0 / 20.0)


def test_non_monotone_series_rejected():
    with pytest.raises(NonMonotoneSeriesError):
        arrival_times_from_positions([0.0, 1.0, 1.0, 2.0], ZoneConfig())


@pytest.mark.parametrize(
    "kwargs",
    [
        {"candidate_positions": (100.0, 110.0, 125.0)},
        {"candidate_positions": (110.0, 100.0)},
        {"candidate_positions": ()},
        {"epsilon": 1.0},
        {"v_min": 40.0},
        {"u_min": 0.5},
        {"dt": 0.0},
    ],
)
def test_invalid_zone_rejected(kwargs):
    with pytest.raises(InvalidConfigError):
        ZoneConfig(**kwargs)


def test_evenly_spaced_zone():
    config = ZoneConfig.evenly_spaced(first=50.0, spacing=5.0, count=3, lane_offset=2.0)
    assert config.candidate_positions == (50.0, 55.0, 60.0)
    assert config.num_candidates == 3
    np.testing.assert_allclose(config.highway_targets, [52.0, 57.0, 62.0])


def test_arrival_times_must_be_ordered():
    ArrivalTimes((1.0, 2.0, math.inf))
    with pytest.raises(EngineError):
        ArrivalTimes((2.0, 1.0))
