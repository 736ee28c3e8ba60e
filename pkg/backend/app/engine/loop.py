"""
Closed-Loop Merge Runner

Per step t of an episode:
    1. read every HDV observation and advance the predictor (hidden state +
       passage memory)
    2. decode arrival predictions, read C^l(t) from the table
    3. solve the merge problem; the CAV follows the plan's cubic exactly for
       one step, or holds the fallback deceleration when nothing is feasible
    4. advance the simulator; when the plan's merge falls inside this step the
       CAV is at its candidate at T^m and moves onto the highway

After the merge the episode runs to the horizon so the HDVs' true arrival
times at the executed candidate can be audited against the realized merge.

Modes:
    conformal  - Problem 2 with the predictor and conformal table
    oracle     - Problem 1 with an OraclePredictor holding the arrivals of a
                 CAV-free rollout of the same seed, plus the same passage
                 memory (reference envelope; evaluation only)

batch_evaluate() runs seeded episodes on a thread pool and aggregates them in
seed order.
"""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .conformal import ConformalTable, check_fingerprint
from .core import EngineError, ZoneConfig
from .hdv_sim import ScenarioTemplate, ScenarioTrace, TrafficSimulator, rollout, sample_scenario
from .metrics import percentiles, violation_threshold, wilson_interval
from .planner import fallback_accel, solve_problem1_oracle, solve_problem2
from .predictors.base import ArrivalPredictor, OraclePredictor

logger = logging.getLogger(__name__)


MODES = ("conformal", "oracle")

MERGE_TOL = 1e-9  # s


@dataclass(frozen=True)
class PlanRecord:
    """What the planner decided at one step (times absolute)."""
    step: int
    time: float
    feasible: bool
    candidate: Optional[int] = None
    merge_time: Optional[float] = None
    merge_speed: Optional[float] = None
    margin: Optional[float] = None
    accel: float = 0.0


@dataclass
class RunResult:
    """
    Outcome of one closed-loop episode.

    `headways` holds |T^m - tau_n| at the executed candidate for every HDV
    (inf for HDVs that never reach it); `violation` is set when any of them is
    ≤ delta.
    """
    seed: int
    mode: str
    merged: bool = False
    merge_step: Optional[int] = None
    candidate: Optional[int] = None
    merge_time: Optional[float] = None
    headways: List[float] = field(default_factory=list)
    violation: bool = False
    collision: bool = False
    failed_reason: Optional[str] = None
    plans: List[PlanRecord] = field(default_factory=list)
    trace: Optional[ScenarioTrace] = None

    @property
    def feasibility(self) -> List[bool]:
        return [p.feasible for p in self.plans]

    @property
    def infeasible_steps(self) -> int:
        return sum(1 for p in self.plans if not p.feasible)

    def summary(self) -> Dict[str, Any]:
        def num(x):
            return None if x is None or not math.isfinite(x) else round(float(x), 6)
        return {
            "seed": self.seed,
            "mode": self.mode,
            "merged": self.merged,
            "merge_step": self.merge_step,
            "candidate": self.candidate,
            "merge_time": num(self.merge_time),
            "min_headway": num(min(self.headways)) if self.headways else None,
            "violation": self.violation,
            "collision": self.collision,
            "planning_steps": len(self.plans),
            "infeasible_steps": self.infeasible_steps,
            "failed_reason": self.failed_reason,
        }


def run_closed_loop(
    seed: int,
    template: ScenarioTemplate,
    predictor: Optional[ArrivalPredictor],
    table: Optional[ConformalTable],
    config: ZoneConfig,
    mode: str = "conformal",
) -> RunResult:
    """
    Simulate one seeded episode under receding-horizon merge control.

    Args:
        seed:      Scenario seed (initial states, drivers and noise).
        template:  Scenario distribution.
        predictor: Arrival predictor (conformal mode).
        table:     Conformal table calibrated for `predictor` (conformal mode).
        config:    Zone geometry and limits.
        mode:      "conformal" or "oracle".

    Returns:
        RunResult; a collision ends the episode with `collision=True`.

    Raises:
        FingerprintMismatchError: If the table was calibrated for another predictor.
    """
    if mode not in MODES:
        raise EngineError(f"unknown mode {mode!r}")
    scenario = sample_scenario(seed, template)
    if scenario.cav is None:
        raise EngineError("scenario has no CAV")

    if mode == "conformal":
        if predictor is None or table is None:
            raise EngineError("conformal mode needs a predictor and a table")
        check_fingerprint(table, predictor)
        if table.num_candidates != config.num_candidates:
            raise EngineError("table and zone disagree on the number of candidates")
    else:
        predictor = OraclePredictor(config, rollout(scenario, None, config).arrival_matrix)

    sim = TrafficSimulator(scenario, config, with_cav=True)
    result = RunResult(seed=seed, mode=mode)
    state = predictor.begin(sim.num_hdvs)
    dt = config.dt
    last_candidate = config.candidate_positions[-1]
    incumbent: Optional[float] = None

    for t in range(config.horizon_steps):
        now = t * dt
        state = predictor.step(state, sim.observations(), now)

        if sim.cav_merged or result.failed_reason is not None:
            sim.step(None)
        else:
            cav = sim.cav_state()
            max_time = config.horizon_time - now
            mu = predictor.predict(state, now)
            if mode == "conformal":
                plan = solve_problem2(cav, mu, table.row(t), config, now=now, passed=state.passed,
                                      max_time=max_time, incumbent=incumbent)
            else:
                plan = solve_problem1_oracle(cav, mu, config, now=now,
                                             max_time=max_time, incumbent=incumbent)

            if plan is None:
                accel = fallback_accel(cav, config)
                incumbent = None
                result.plans.append(PlanRecord(step=t, time=now, feasible=False, accel=accel))
                logger.debug("seed %d step %d: no feasible merge, fallback %.2f", seed, t, accel)
                sim.step(accel)
            else:
                accel = plan.first_accel
                incumbent = plan.merge_time - dt
                result.plans.append(PlanRecord(
                    step=t, time=now, feasible=True, candidate=plan.candidate,
                    merge_time=now + plan.merge_time, merge_speed=plan.merge_speed,
                    margin=plan.margin, accel=accel,
                ))
                sim.step(cav_trajectory=plan.psi)
                # the cubic meets the candidate exactly at T^m
                if plan.merge_time <= dt + MERGE_TOL:
                    result.merged = True
                    result.merge_step = t + 1
                    result.candidate = plan.candidate
                    result.merge_time = now + plan.merge_time
                    sim.merge_cav()
            if not sim.cav_merged and sim.cav_position >= last_candidate:
                result.failed_reason = "passed every candidate without a certified merge"
                logger.info("seed %d: CAV left the merging lane unmerged", seed)

        if sim.collided:
            result.collision = True
            result.failed_reason = f"collision at step {sim.step_index}"
            logger.warning("seed %d: %s", seed, result.failed_reason)
            break

    trace = sim.trace()
    result.trace = trace
    if result.merged:
        truth = trace.arrival_matrix[:, result.candidate]
        headways = [abs(result.merge_time - tau) if math.isfinite(tau) else math.inf for tau in truth]
        result.headways = [float(h) for h in headways]
        result.violation = any(h <= config.headway_delta for h in headways)
    elif result.failed_reason is None:
        result.failed_reason = "horizon ended before merging"
    return result


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------

@dataclass
class BatchReport:
    """Aggregate of matched conformal (and optionally oracle) episodes."""
    runs: List[RunResult]
    oracle_runs: List[RunResult]
    epsilon: float
    config: ZoneConfig

    @property
    def infeasible_everywhere(self) -> bool:
        """True if no episode ever found a feasible plan."""
        return bool(self.runs) and all(not any(r.feasibility) for r in self.runs)

    def to_dict(self) -> Dict[str, Any]:
        n = len(self.runs)
        merged = [r for r in self.runs if r.merged]
        violations = sum(1 for r in self.runs if r.violation)
        times = [r.merge_time for r in merged]
        planning = sum(len(r.plans) for r in self.runs)
        infeasible = sum(r.infeasible_steps for r in self.runs)
        low, high = wilson_interval(violations, n)

        report: Dict[str, Any] = {
            "runs": n,
            "epsilon": self.epsilon,
            "merged": len(merged),
            "merge_success_rate": round(len(merged) / n, 6) if n else 0.0,
            "violations": violations,
            "violation_rate": round(violations / n, 6) if n else 0.0,
            "violation_ci": [round(low, 6), round(high, 6)],
            "violation_threshold": round(violation_threshold(self.epsilon, n), 6) if n else None,
            "collisions": sum(1 for r in self.runs if r.collision),
            "mean_merge_time": round(float(np.mean(times)), 6) if times else None,
            "merge_time_percentiles": percentiles(times),
            "infeasible_step_frequency": round(infeasible / planning, 6) if planning else 0.0,
            "infeasible_everywhere": self.infeasible_everywhere,
            "note": (
                "violation rate is a Monte-Carlo observation over episodes; the conformal "
                "guarantee holds per planning instant and per HDV"
            ),
        }

        if self.oracle_runs:
            oracle_times = [r.merge_time for r in self.oracle_runs if r.merged]
            paired = [
                (c.merge_time, o.merge_time)
                for c, o in zip(self.runs, self.oracle_runs)
                if c.merged and o.merged
            ]
            report["oracle"] = {
                "merged": len(oracle_times),
                "mean_merge_time": round(float(np.mean(oracle_times)), 6) if oracle_times else None,
                "envelope": [round(min(oracle_times), 6), round(max(oracle_times), 6)] if oracle_times else None,
                "violations": sum(1 for r in self.oracle_runs if r.violation),
                "paired_runs": len(paired),
                "paired_mean_gap": round(float(np.mean([c - o for c, o in paired])), 6) if paired else None,
            }
        return report


def batch_evaluate(
    seeds: Sequence[int],
    template: ScenarioTemplate,
    predictor: ArrivalPredictor,
    table: ConformalTable,
    config: ZoneConfig,
    workers: int = 1,
    include_oracle: bool = True,
) -> BatchReport:
    """
    Run one conformal episode per seed (plus the oracle on the same seeds).

    Results are kept in seed order regardless of completion order.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise EngineError("batch needs at least one seed")
    check_fingerprint(table, predictor)

    def run_all(mode: str) -> List[RunResult]:
        if workers <= 1:
            return [run_closed_loop(s, template, predictor, table, config, mode) for s in seeds]
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(
                lambda s: run_closed_loop(s, template, predictor, table, config, mode), seeds
            ))

    runs = run_all("conformal")
    logger.info("batch: %d conformal episodes, %d merged", len(runs), sum(r.merged for r in runs))
    oracle_runs = run_all("oracle") if include_oracle else []
    return BatchReport(runs=runs, oracle_runs=oracle_runs, epsilon=table.epsilon, config=config)
