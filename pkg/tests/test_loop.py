import csv
import io
import math

import numpy as np
import pytest

from backend.app.engine.artifacts import plot_csv
from backend.app.engine.conformal import ConformalTable, FingerprintMismatchError, monotonize
from backend.app.engine.core import EngineError
from backend.app.engine.hdv_sim import ScenarioTemplate, rollout, sample_scenario
from backend.app.engine.loop import batch_evaluate, run_closed_loop
from backend.app.engine.metrics import violation_threshold
from backend.app.engine.pipeline import calibrated_batch
from backend.app.engine.predictors import OraclePredictor, PhysicsPredictor

from conftest import small_template, small_zone


def _zero_table(zone, fingerprint=""):
    return ConformalTable.constant(0.0, zone.horizon_steps + 1, zone.num_candidates, fingerprint=fingerprint)


def _side_by_side(rho: float) -> ScenarioTemplate:
    """One HDV level with the CAV, both at 20 m/s, no noise."""
    return ScenarioTemplate(
        num_hdvs=1,
        lead_position=(0.0, 0.0),
        speed=(20.0, 20.0),
        idm_v0=(20.0, 20.0),
        rho=(rho, rho),
        alpha=(0.0005, 0.0005),
        noise_std=(0.0, 0.0),
        cav_position=(0.0, 0.0),
        cav_speed=(20.0, 20.0),
    )


def test_run_is_deterministic(zone, template):
    predictor = PhysicsPredictor(zone)
    table = _zero_table(zone)
    a = run_closed_loop(4, template, predictor, table, zone)
    b = run_closed_loop(4, template, predictor, table, zone)
    assert a.summary() == b.summary()
    assert [p.accel for p in a.plans] == [p.accel for p in b.plans]


def test_merged_run_audits_every_hdv(zone, template):
    predictor = PhysicsPredictor(zone)
    runs = [run_closed_loop(s, template, predictor, _zero_table(zone), zone) for s in range(10)]
    merged = [r for r in runs if r.merged]
    assert merged
    for result in merged:
        assert len(result.headways) == template.num_hdvs
        assert result.violation == any(h <= zone.headway_delta for h in result.headways)
        assert result.trace.cav_merge_step == result.merge_step
        assert result.summary()["planning_steps"] == len(result.plans)
    for result in runs:
        if not result.merged:
            assert result.failed_reason is not None


def test_infinite_table_blocks_unpassed_candidates(zone, template):
    table = ConformalTable.constant(math.inf, zone.horizon_steps + 1, zone.num_candidates)
    result = run_closed_loop(2, template, PhysicsPredictor(zone), table, zone)
    # every HDV starts behind every candidate
    assert not result.plans[0].feasible
    assert result.plans[0].accel == pytest.approx(
        min(max(zone.u_min / 2.0, (zone.v_min - result.trace.cav_speeds[0]) / zone.dt), zone.u_max)
    )


def test_yielding_driver_lets_the_cav_ahead():
    zone = small_zone()
    predictor = PhysicsPredictor(zone)
    table = _zero_table(zone)

    selfish = run_closed_loop(0, _side_by_side(0.0), predictor, table, zone)
    yielding = run_closed_loop(0, _side_by_side(8.0), predictor, table, zone)
    assert selfish.merged and yielding.merged

    arrival = selfish.trace.arrival_matrix[0, selfish.candidate]
    assert selfish.merge_time > arrival
    arrival = yielding.trace.arrival_matrix[0, yielding.candidate]
    assert yielding.merge_time < arrival


def test_oracle_mode_needs_no_predictor(zone, template):
    result = run_closed_loop(3, template, None, None, zone, mode="oracle")
    assert result.mode == "oracle"
    assert result.plans


def test_bad_mode_and_missing_table(zone, template):
    with pytest.raises(EngineError):
        run_closed_loop(0, template, None, None, zone, mode="greedy")
    with pytest.raises(EngineError):
        run_closed_loop(0, template, PhysicsPredictor(zone), None, zone)


def test_table_must_match_predictor(zone, template):
    table = _zero_table(zone, fingerprint="recurrent:deadbeef")
    with pytest.raises(FingerprintMismatchError):
        run_closed_loop(0, template, PhysicsPredictor(zone), table, zone)


def test_plot_csv_columns(zone, template):
    result = run_closed_loop(5, template, PhysicsPredictor(zone), _zero_table(zone), zone)
    rows = list(csv.DictReader(io.StringIO(plot_csv(result, zone))))
    assert len(rows) == result.trace.num_steps
    for column in ("step", "time_s", "cav_position", "cav_speed", "hdv0_position", "hdv1_speed", "feasible"):
        assert column in rows[0]


# ---------------------------------------------------------------------------
# Exact truth
# ---------------------------------------------------------------------------

def _true_arrival_predictor(seed, template, zone):
    scenario = sample_scenario(seed, template)
    return OraclePredictor(zone, rollout(scenario, None, zone).arrival_matrix)


def _shrinking_table(zone, predictor, seed):
    """Bounds that decay over the episode with jitter, then monotonized."""
    rng = np.random.default_rng(seed)
    S, L = zone.horizon_steps + 1, zone.num_candidates
    start = rng.uniform(0.0, 1.5, size=L)
    jitter = rng.uniform(0.0, 0.3, size=(S, L))
    bounds = start * np.linspace(1.0, 0.0, S)[:, None] + jitter
    raw = ConformalTable(bounds, np.ones((S, L), dtype=int), zone.epsilon, fingerprint=predictor.fingerprint())
    return monotonize(raw)


def _assert_feasibility_is_kept(result):
    feasible = result.feasibility
    if True in feasible:
        first = feasible.index(True)
        assert all(feasible[first:]), f"seed {result.seed} lost its plan after step {first}"


def test_oracle_with_exact_truth_never_violates(zone):
    # without yielding the CAV does not move the HDVs before it merges
    template = small_template(rho=(0.0, 0.0))
    runs = [run_closed_loop(s, template, None, None, zone, mode="oracle") for s in range(30)]
    merged = [r for r in runs if r.merged]
    assert merged
    for result in merged:
        assert not result.violation
        assert min(result.headways) > zone.headway_delta
        assert result.merge_time == result.plans[-1].merge_time


@pytest.mark.parametrize("seed", range(8))
def test_zero_table_on_true_arrivals_replays_the_oracle(zone, template, seed):
    predictor = _true_arrival_predictor(seed, template, zone)
    table = _zero_table(zone, fingerprint=predictor.fingerprint())
    conformal = run_closed_loop(seed, template, predictor, table, zone)
    oracle = run_closed_loop(seed, template, None, None, zone, mode="oracle")

    assert conformal.plans == oracle.plans
    assert {**conformal.summary(), "mode": None} == {**oracle.summary(), "mode": None}
    assert conformal.headways == oracle.headways
    np.testing.assert_array_equal(conformal.trace.cav_positions, oracle.trace.cav_positions)
    np.testing.assert_array_equal(conformal.trace.cav_accels, oracle.trace.cav_accels)
    np.testing.assert_array_equal(conformal.trace.hdv_positions, oracle.trace.hdv_positions)


@pytest.mark.parametrize("seed", range(10))
def test_shrinking_bounds_keep_the_plan(zone, seed):
    template = small_template(rho=(0.0, 0.0))
    predictor = _true_arrival_predictor(seed, template, zone)
    table = _shrinking_table(zone, predictor, seed)
    result = run_closed_loop(seed, template, predictor, table, zone)
    _assert_feasibility_is_kept(result)
    assert not result.violation


@pytest.mark.slow
def test_shrinking_bounds_keep_the_plan_many(zone):
    template = small_template(rho=(0.0, 0.0))
    for seed in range(100, 200):
        predictor = _true_arrival_predictor(seed, template, zone)
        result = run_closed_loop(seed, template, predictor, _shrinking_table(zone, predictor, seed), zone)
        _assert_feasibility_is_kept(result)
        assert not result.violation


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def test_batch_is_seed_ordered_across_workers(zone, template):
    predictor = PhysicsPredictor(zone)
    table = _zero_table(zone)
    serial = batch_evaluate(range(6), template, predictor, table, zone, workers=1)
    threaded = batch_evaluate(range(6), template, predictor, table, zone, workers=3)
    assert [r.summary() for r in serial.runs] == [r.summary() for r in threaded.runs]
    assert [r.summary() for r in serial.oracle_runs] == [r.summary() for r in threaded.oracle_runs]
    assert [r.seed for r in threaded.runs] == list(range(6))


def test_batch_report(zone, template):
    report = batch_evaluate([0, 1, 2], template, PhysicsPredictor(zone), _zero_table(zone), zone).to_dict()
    for key in ("runs", "merged", "violation_rate", "violation_ci", "violation_threshold",
                "mean_merge_time", "infeasible_step_frequency", "oracle"):
        assert key in report
    assert report["runs"] == 3
    assert 0.0 <= report["violation_rate"] <= 1.0


def test_batch_without_oracle(zone, template):
    report = batch_evaluate([0], template, PhysicsPredictor(zone), _zero_table(zone), zone, include_oracle=False)
    assert report.oracle_runs == []
    assert "oracle" not in report.to_dict()


def test_empty_batch_rejected(zone, template):
    with pytest.raises(EngineError):
        batch_evaluate([], template, PhysicsPredictor(zone), _zero_table(zone), zone)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["physics", "recurrent"])
def test_violation_rate_within_target(kind, template, request):
    zone = small_zone(epsilon=0.1)
    predictor = PhysicsPredictor(zone) if kind == "physics" else request.getfixturevalue("trained_recurrent")
    report = calibrated_batch(zone, template, predictor, seeds=range(200),
                              calibration_seeds=range(10_000, 10_200), workers=4)
    doc = report.to_dict()
    assert doc["runs"] == 200
    assert doc["epsilon"] == 0.1
    assert doc["violation_rate"] <= violation_threshold(0.1, 200)
    assert doc["oracle"]["paired_runs"] > 0
    assert doc["oracle"]["paired_mean_gap"] >= -1e-6


def test_calibrated_batch(zone, template):
    predictor = PhysicsPredictor(zone)
    report = calibrated_batch(zone, template, predictor, seeds=[0, 1],
                              calibration_seeds=range(500, 530), include_oracle=False)
    assert [r.seed for r in report.runs] == [0, 1]
    assert report.epsilon == zone.epsilon
    assert all(p.accel <= zone.u_max + 1e-9 for r in report.runs for p in r.plans)
