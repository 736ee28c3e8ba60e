import math

import numpy as np
import pytest

from backend.app.engine.core import (
    ArrivalTimes,
    VehicleState,
    ZoneConfig,
    boundary_coeffs,
    eval_trajectory,
    extremes_arrays,
)
from backend.app.engine.planner import (
    ForbiddenSet,
    candidate_merge_times,
    fallback_accel,
    forbidden_intervals,
    kinematic_feasible,
    merge_speed_grid,
    solve_problem1_oracle,
    solve_problem2,
    verify_plan,
)


def _random_case(rng, zone, num_hdvs=2):
    cav = VehicleState(float(rng.uniform(0.0, 40.0)), float(rng.uniform(10.0, 30.0)))
    predictions = np.sort(rng.uniform(0.5, 12.0, size=(num_hdvs, zone.num_candidates)), axis=1)
    table_row = rng.uniform(0.0, 1.5, size=zone.num_candidates)
    return cav, predictions, table_row


def _brute_force_earliest(cav, predictions, table_row, zone):
    """Earliest admissible merge time by exhaustive enumeration (closed headway intervals)."""
    speeds = merge_speed_grid(zone)
    horizon = zone.horizon_time
    half = zone.headway_delta + table_row
    best = math.inf
    for l, target in enumerate(zone.candidate_positions):
        distance = target - cav.position
        if distance <= 0:
            continue
        times = [k * zone.dt for k in range(1, int(math.floor(horizon / zone.dt + 1e-9)) + 1)]
        times += [
            mu + half[l] + zone.dt * zone.endpoint_nudge
            for mu in predictions[:, l]
            if zone.dt <= mu + half[l] + zone.dt * zone.endpoint_nudge <= horizon
        ]
        for T in sorted(times):
            if T >= best:
                break
            if np.any(np.abs(predictions[:, l] - T) <= half[l]):
                continue
            a, b, c, _ = boundary_coeffs(cav.speed, distance, speeds, T)
            v_lo, v_hi, u_lo, u_hi = extremes_arrays(a, b, c, T)
            ok = (v_lo >= zone.v_min - 1e-9) & (v_hi <= zone.v_max + 1e-9)
            ok &= (u_lo >= zone.u_min - 1e-9) & (u_hi <= zone.u_max + 1e-9)
            if ok.any():
                best = T
                break
    return best


def _check_against_brute_force(zone, cases, seed):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        cav, predictions, table_row = _random_case(rng, zone)
        expected = _brute_force_earliest(cav, predictions, table_row, zone)
        plan = solve_problem2(cav, predictions, table_row, zone)
        if math.isinf(expected):
            assert plan is None
        else:
            assert plan is not None
            assert plan.merge_time == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------------------
# Forbidden intervals
# ---------------------------------------------------------------------------

def test_intervals_merge_overlaps():
    forbidden = forbidden_intervals([[2.0], [3.0], [9.0]], [0.5], delta=1.0)
    assert forbidden.intervals[0] == ((0.5, 4.5), (7.5, 10.5))
    assert forbidden.upper_endpoints(0) == [4.5, 10.5]


def test_open_and_closed_endpoints():
    open_set = forbidden_intervals([[2.0]], [0.0], delta=1.0)
    closed_set = forbidden_intervals([[2.0]], [0.0], delta=1.0, closed=True)
    assert not open_set.contains(0, 3.0) and not open_set.contains(0, 1.0)
    assert closed_set.contains(0, 3.0) and closed_set.contains(0, 1.0)
    assert open_set.contains(0, 2.5) and closed_set.contains(0, 2.5)


def test_infinite_bound_forbids_whole_axis():
    forbidden = forbidden_intervals([[2.0, 4.0]], [math.inf, 0.2], delta=1.0)
    assert forbidden.intervals[0] == ((-math.inf, math.inf),)
    assert forbidden.upper_endpoints(0) == []
    assert forbidden.contains(0, 100.0)
    assert not forbidden.contains(1, 0.5)


def test_passed_entries_drop_the_bound():
    forbidden = forbidden_intervals([[-0.5, 3.0]], [math.inf, math.inf], delta=1.0, passed=[[True, False]])
    assert forbidden.intervals[0] == ((-1.5, 0.5),)
    assert forbidden.intervals[1] == ((-math.inf, math.inf),)


def test_never_arriving_hdv_is_ignored():
    forbidden = forbidden_intervals([[math.inf]], [1.0], delta=1.0)
    assert forbidden.intervals[0] == ()
    assert forbidden.margin(0, 3.0) == math.inf


def test_margin():
    forbidden = forbidden_intervals([[2.0], [6.0]], [0.5], delta=1.0)
    assert forbidden.margin(0, 4.0) == pytest.approx(0.5)
    assert forbidden.margin(0, 2.0) == pytest.approx(-1.5)
    assert ForbiddenSet(((),)).margin(0, 1.0) == math.inf


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def test_merge_speed_grid_includes_limits(zone):
    grid = merge_speed_grid(zone)
    assert grid[0] == zone.v_min and grid[-1] == zone.v_max
    assert np.allclose(np.diff(grid), zone.merge_speed_resolution)


def test_kinematic_feasible():
    config = ZoneConfig()
    assert kinematic_feasible(20.0, 80.0, 4.0, 20.0, config)
    # 80 m in 1 s needs 80 m/s on average
    assert not kinematic_feasible(20.0, 80.0, 1.0, 20.0, config)
    assert not kinematic_feasible(20.0, 80.0, 0.0, 20.0, config)


def test_candidate_times_start_at_kinematic_bound(zone):
    forbidden = forbidden_intervals([[3.0]], [0.5], delta=1.0)
    times = candidate_merge_times(35.0, zone, forbidden, 0, zone.horizon_time)
    assert times[0] >= 1.0 - 1e-9
    assert 4.5 + zone.dt * zone.endpoint_nudge in times
    assert times == sorted(times)


def test_candidate_times_keep_sub_step_incumbent(zone):
    forbidden = forbidden_intervals(np.zeros((0, 1)), [0.0], delta=1.0)
    times = candidate_merge_times(1.0, zone, forbidden, 0, zone.horizon_time, incumbent=0.05)
    assert times[0] == 0.05


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def test_free_road_merges_at_first_candidate(zone):
    cav = VehicleState(0.0, 20.0)
    plan = solve_problem2(cav, np.zeros((0, zone.num_candidates)), np.zeros(zone.num_candidates), zone)
    assert plan is not None
    assert plan.candidate == 0
    assert plan.margin == math.inf
    # 60 m at 20 m/s with a 3 m/s^2 ceiling cannot beat 2.4 s
    assert plan.merge_time <= 3.0
    p, v, _ = eval_trajectory(plan.psi, plan.merge_time)
    assert p == pytest.approx(60.0)
    assert v == pytest.approx(plan.merge_speed)


def test_plan_avoids_forbidden_window(zone):
    cav = VehicleState(0.0, 20.0)
    predictions = np.array([[3.0, 3.5, 4.0, 4.5]])
    plan = solve_problem2(cav, predictions, np.full(4, 0.5), zone)
    assert plan is not None
    forbidden = forbidden_intervals(predictions, np.full(4, 0.5), zone.headway_delta, closed=True)
    assert verify_plan(plan, cav, forbidden, zone)
    assert abs(predictions[0, plan.candidate] - plan.merge_time) > zone.headway_delta + 0.5


def test_predictions_are_shifted_by_now(zone):
    cav = VehicleState(0.0, 20.0)
    predictions = np.array([[3.0, 3.5, 4.0, 4.5]])
    at_zero = solve_problem2(cav, predictions, np.full(4, 0.2), zone)
    later = solve_problem2(cav, predictions + 5.0, np.full(4, 0.2), zone, now=5.0)
    assert at_zero.merge_time == pytest.approx(later.merge_time)
    assert at_zero.candidate == later.candidate


def test_infinite_row_is_infeasible(zone):
    cav = VehicleState(0.0, 20.0)
    predictions = np.array([[3.0, 3.5, 4.0, 4.5]])
    assert solve_problem2(cav, predictions, np.full(4, math.inf), zone) is None


def test_passed_candidates_ignore_the_bound(zone):
    cav = VehicleState(0.0, 20.0)
    predictions = np.array([[-5.0, -4.5, -4.0, -3.5]])
    passed = np.ones((1, 4), dtype=bool)
    plan = solve_problem2(cav, predictions, np.full(4, math.inf), zone, passed=passed)
    assert plan is not None and plan.candidate == 0


def test_cav_past_every_candidate_is_infeasible(zone):
    cav = VehicleState(200.0, 20.0)
    assert solve_problem2(cav, np.zeros((0, 4)), np.zeros(4), zone) is None


def test_both_problems_use_closed_intervals():
    # dt-aligned arrival so the endpoint T = 4.0 is on the grid
    config = ZoneConfig(dt=0.5, horizon_steps=40, candidate_positions=(40.0,), merge_speed_resolution=0.5)
    cav = VehicleState(0.0, 10.0)
    arrivals = np.array([[3.0]])
    oracle = solve_problem1_oracle(cav, arrivals, config)
    conformal = solve_problem2(cav, arrivals, np.zeros(1), config)
    assert oracle.merge_time > 4.0
    assert conformal == oracle


def test_zero_row_matches_oracle(zone):
    rng = np.random.default_rng(7)
    for _ in range(40):
        cav, predictions, _ = _random_case(rng, zone)
        passed = rng.uniform(size=predictions.shape) < 0.2
        now = float(rng.uniform(0.0, 2.0))
        oracle = solve_problem1_oracle(cav, predictions + now, zone, now=now)
        conformal = solve_problem2(cav, predictions + now, np.zeros(zone.num_candidates), zone,
                                   now=now, passed=passed)
        assert conformal == oracle


def test_oracle_accepts_arrival_objects(zone):
    cav = VehicleState(0.0, 20.0)
    times = [ArrivalTimes((3.0, 3.5, 4.0, 4.5))]
    plan = solve_problem1_oracle(cav, times, zone)
    again = solve_problem1_oracle(cav, np.array([[3.0, 3.5, 4.0, 4.5]]), zone)
    assert plan.merge_time == again.merge_time


def test_matches_brute_force(zone):
    _check_against_brute_force(zone, cases=60, seed=0)


@pytest.mark.slow
def test_matches_brute_force_many(zone):
    _check_against_brute_force(zone, cases=500, seed=1)


def test_fallback_accel(zone):
    assert fallback_accel(VehicleState(0.0, 20.0), zone) == zone.u_min / 2.0
    assert fallback_accel(VehicleState(0.0, zone.v_min + 0.1), zone) == pytest.approx(-0.5)
    assert fallback_accel(VehicleState(0.0, zone.v_min), zone) == 0.0

