"""
Human-Driven Vehicle Simulator

Generates the traffic the CAV has to merge into. Each HDV runs a modified IDM:

    u_n(t) = u_IDM(t) - rho_n * exp(-alpha * dp(t)^2) + w_n(t)

    - u_IDM:  standard Treiber IDM (exponent 4) against the vehicle ahead
    - rho_n:  altruism level, how hard the driver yields to a nearby merging CAV
    - dp:     longitudinal distance HDV → CAV on the common axis (sign ignored)
    - w_n:    i.i.d. Gaussian driving impulse, seeded per episode

Driver parameters and the altruism term stay inside the simulator; the
controller only sees the observation tuple (leader, self, follower, CAV).

Scenarios are drawn i.i.d. from a ScenarioTemplate, so trajectories taken from
distinct scenarios are exchangeable by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .core import (
    ArrivalTimes,
    CubicCoeffs,
    EngineError,
    VehicleState,
    ZoneConfig,
    VEHICLE_LENGTH,
    arrival_times_from_positions,
    eval_trajectory,
)

logger = logging.getLogger(__name__)


SENTINEL_DISTANCE = 1000.0   # m, stand-in for a missing neighbour
SPEED_FLOOR = 0.1            # m/s, HDVs never stop
OBSERVATION_SIZE = 8

Range = Tuple[float, float]


class InfeasibleTemplateError(EngineError):
    """Raised when a ScenarioTemplate cannot produce a valid initial configuration."""
    pass


@dataclass(frozen=True)
class DriverParams:
    """Hidden per-driver parameters (never exposed to the controller)."""
    rho: float = 0.0          # m/s^2 altruism level
    alpha: float = 0.005      # 1/m^2 sensitivity to the CAV
    idm_v0: float = 30.0      # desired speed
    idm_T: float = 1.5        # desired time headway
    idm_s0: float = 2.0       # minimum gap
    idm_a: float = 1.5        # max acceleration
    idm_b: float = 2.0        # comfortable deceleration
    noise_std: float = 0.1    # std of w_n(t)
    accel_min: float = -8.0   # physical clamp
    accel_max: float = 3.0

    def __post_init__(self) -> None:
        if min(self.rho, self.alpha, self.noise_std) < 0:
            raise EngineError("rho, alpha and noise_std must be non-negative")
        if min(self.idm_v0, self.idm_T, self.idm_s0, self.idm_a, self.idm_b) <= 0:
            raise EngineError("IDM parameters must be strictly positive")
        if not self.accel_min < 0 < self.accel_max:
            raise EngineError("HDV acceleration clamp must straddle zero")


@dataclass(frozen=True)
class ScenarioTemplate:
    """
    Sampling ranges for one scenario. Each (lo, hi) pair is drawn uniformly;
    zero-width ranges yield the exact value.

    HDV 0 leads; HDV n+1 starts `gap` metres (bumper to bumper) behind HDV n.
    CAV ranges are in ramp coordinates.
    """
    num_hdvs: int = 3
    lead_position: Range = (20.0, 80.0)
    gap: Range = (25.0, 60.0)
    speed: Range = (20.0, 30.0)
    idm_v0: Range = (25.0, 35.0)
    idm_T: Range = (1.5, 1.5)
    idm_s0: Range = (2.0, 2.0)
    idm_a: Range = (1.5, 1.5)
    idm_b: Range = (2.0, 2.0)
    rho: Range = (0.0, 2.0)
    alpha: Range = (0.005, 0.005)
    noise_std: Range = (0.1, 0.1)
    cav_position: Range = (0.0, 0.0)
    cav_speed: Range = (15.0, 25.0)
    cav_target_speed: Range = (15.0, 30.0)
    cav_merge_candidates: Tuple[int, int] = (0, 9)

    def validate(self) -> None:
        """Raise InfeasibleTemplateError if any draw could violate the invariants."""
        if self.num_hdvs < 0:
            raise InfeasibleTemplateError("num_hdvs must be non-negative")
        for name in ("lead_position", "gap", "speed", "idm_v0", "idm_T", "idm_s0", "idm_a",
                     "idm_b", "rho", "alpha", "noise_std", "cav_position", "cav_speed",
                     "cav_target_speed", "cav_merge_candidates"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InfeasibleTemplateError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.gap[0] < self.idm_s0[1]:
            raise InfeasibleTemplateError(
                f"gap lower bound {self.gap[0]} m violates the minimum gap {self.idm_s0[1]} m"
            )
        if self.speed[0] <= 0 or self.cav_speed[0] <= 0:
            raise InfeasibleTemplateError("initial speeds must be positive")
        for name in ("idm_v0", "idm_T", "idm_s0", "idm_a", "idm_b"):
            if getattr(self, name)[0] <= 0:
                raise InfeasibleTemplateError(f"{name} must be strictly positive")
        for name in ("rho", "alpha", "noise_std"):
            if getattr(self, name)[0] < 0:
                raise InfeasibleTemplateError(f"{name} must be non-negative")
        if self.cav_merge_candidates[0] < 0:
            raise InfeasibleTemplateError("cav_merge_candidates must be non-negative indices")


@dataclass(frozen=True)
class Scenario:
    """Initial conditions of one episode."""
    seed: int
    hdv_states: Tuple[VehicleState, ...]
    drivers: Tuple[DriverParams, ...]
    cav: Optional[VehicleState] = None
    cav_target_speed: float = 25.0
    cav_merge_candidate: int = 0


@dataclass(frozen=True)
class ScenarioTrace:
    """
    A simulated episode. Series have one column per recorded step (T+1 for a
    complete episode, fewer when a collision ended it early).

    Observations are raw highway-axis tuples
    (p_lead, v_lead, p_self, v_self, p_follow, v_follow, p_cav, v_cav).
    CAV positions are in ramp coordinates.
    """
    seed: int
    config: ZoneConfig
    hdv_positions: np.ndarray
    hdv_speeds: np.ndarray
    hdv_accels: np.ndarray
    observations: np.ndarray
    arrivals: Tuple[ArrivalTimes, ...]
    cav_positions: Optional[np.ndarray] = None
    cav_speeds: Optional[np.ndarray] = None
    cav_accels: Optional[np.ndarray] = None
    cav_merge_step: Optional[int] = None
    collision: bool = False
    drivers: Optional[Tuple[DriverParams, ...]] = None

    @property
    def num_hdvs(self) -> int:
        return int(self.hdv_positions.shape[0])

    @property
    def num_steps(self) -> int:
        return int(self.hdv_positions.shape[1])

    @property
    def arrival_matrix(self) -> np.ndarray:
        """(N, L) ground-truth arrival times."""
        if not self.arrivals:
            return np.zeros((0, self.config.num_candidates))
        return np.stack([a.as_array() for a in self.arrivals])

    def state(self, n: int, t: int) -> VehicleState:
        return VehicleState(float(self.hdv_positions[n, t]), float(self.hdv_speeds[n, t]))

    def cav_state(self, t: int) -> Optional[VehicleState]:
        if self.cav_positions is None:
            return None
        return VehicleState(float(self.cav_positions[t]), float(self.cav_speeds[t]))


# ---------------------------------------------------------------------------
# Driver model
# ---------------------------------------------------------------------------

def idm_accel(
    own: VehicleState,
    leader: Optional[VehicleState],
    params: DriverParams,
    length: float = VEHICLE_LENGTH,
) -> float:
    """
    IDM acceleration, clamped to the driver's physical limits.

    A non-positive bumper gap returns accel_min (emergency braking); the caller
    treats it as a collision.
    """
    v = own.speed
    free = (v / params.idm_v0) ** 4
    interaction = 0.0
    if leader is not None:
        gap = leader.position - own.position - length
        if gap <= 0:
            return params.accel_min
        dv = v - leader.speed
        s_star = params.idm_s0 + max(
            0.0, v * params.idm_T + v * dv / (2.0 * math.sqrt(params.idm_a * params.idm_b))
        )
        interaction = (s_star / gap) ** 2
    accel = params.idm_a * (1.0 - free - interaction)
    return float(min(max(accel, params.accel_min), params.accel_max))


def altruism_decrement(delta_p: float, rho: float, alpha: float) -> float:
    """Yielding deceleration rho * exp(-alpha * dp^2) subtracted from the IDM output."""
    return float(rho * math.exp(-alpha * delta_p * delta_p))


# ---------------------------------------------------------------------------
# Scenario sampling
# ---------------------------------------------------------------------------

def _draw(rng: np.random.Generator, bounds: Range) -> float:
    lo, hi = bounds
    # one draw per field even for a pinned range, so later fields keep their stream
    return float(rng.uniform(lo, hi))


def sample_scenario(seed: int, template: ScenarioTemplate) -> Scenario:
    """
    Draw one scenario deterministically from `seed`.

    Gaps, speeds and driver parameters are i.i.d. across HDVs; positions are
    ordered with HDV 0 in front.
    """
    template.validate()
    rng = np.random.default_rng(seed)

    states = []
    drivers = []
    position = _draw(rng, template.lead_position)
    for n in range(template.num_hdvs):
        if n > 0:
            position = position - VEHICLE_LENGTH - _draw(rng, template.gap)
        states.append(VehicleState(position, _draw(rng, template.speed)))
        drivers.append(DriverParams(
            rho=_draw(rng, template.rho),
            alpha=_draw(rng, template.alpha),
            idm_v0=_draw(rng, template.idm_v0),
            idm_T=_draw(rng, template.idm_T),
            idm_s0=_draw(rng, template.idm_s0),
            idm_a=_draw(rng, template.idm_a),
            idm_b=_draw(rng, template.idm_b),
            noise_std=_draw(rng, template.noise_std),
        ))

    cav = VehicleState(_draw(rng, template.cav_position), _draw(rng, template.cav_speed))
    target_speed = _draw(rng, template.cav_target_speed)
    lo, hi = template.cav_merge_candidates
    merge_candidate = int(rng.integers(lo, hi + 1))

    return Scenario(
        seed=seed,
        hdv_states=tuple(states),
        drivers=tuple(drivers),
        cav=cav,
        cav_target_speed=target_speed,
        cav_merge_candidate=merge_candidate,
    )


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------

class TrafficSimulator:
    """
    Step-wise simulator for one scenario.

    The CAV (if any) drives on the ramp under external control until
    `merge_cav()` is called; from then on it is a car-following vehicle on the
    highway (IDM towards v_max, no altruism, no noise).

    Attributes:
        step_index: Index of the current (already recorded) step.
        collided:   True once any bumper gap on the highway became non-positive.
    """

    def __init__(
        self,
        scenario: Scenario,
        config: ZoneConfig,
        with_cav: bool = True,
        noise_seed: Optional[int] = None,
    ) -> None:
        self.scenario = scenario
        self.config = config
        self.drivers = scenario.drivers
        self.num_hdvs = len(scenario.hdv_states)
        steps = config.horizon_steps + 1

        seed = scenario.seed if noise_seed is None else noise_seed
        self._rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        self._noise_std = np.array([d.noise_std for d in self.drivers], dtype=np.float64)

        self.positions = np.array([s.position for s in scenario.hdv_states], dtype=np.float64)
        self.speeds = np.array([s.speed for s in scenario.hdv_states], dtype=np.float64)
        self.has_cav = with_cav and scenario.cav is not None
        self.cav_position = scenario.cav.position if self.has_cav else math.nan
        self.cav_speed = scenario.cav.speed if self.has_cav else math.nan
        self.cav_merged = False
        self.cav_merge_step: Optional[int] = None
        self._cav_driver = DriverParams(idm_v0=config.v_max, noise_std=0.0, rho=0.0)

        self.step_index = 0
        self.collided = False

        self._pos_hist = np.zeros((self.num_hdvs, steps))
        self._spd_hist = np.zeros((self.num_hdvs, steps))
        self._acc_hist = np.zeros((self.num_hdvs, steps))
        self._obs_hist = np.zeros((self.num_hdvs, steps, OBSERVATION_SIZE))
        self._cav_hist = np.full((3, steps), math.nan)
        self._record()

    # -- geometry ---------------------------------------------------------

    @property
    def cav_axis_position(self) -> float:
        """CAV position on the common (highway) axis."""
        return self.cav_position + self.config.lane_offset

    def cav_state(self) -> Optional[VehicleState]:
        if not self.has_cav:
            return None
        return VehicleState(self.cav_position, self.cav_speed)

    def hdv_states(self) -> Tuple[VehicleState, ...]:
        return tuple(VehicleState(float(p), float(v)) for p, v in zip(self.positions, self.speeds))

    def _leader_of(self, n: int) -> Optional[VehicleState]:
        candidates = []
        if n > 0:
            candidates.append(VehicleState(float(self.positions[n - 1]), float(self.speeds[n - 1])))
        if self.cav_merged and self.cav_axis_position > self.positions[n]:
            candidates.append(VehicleState(self.cav_axis_position, self.cav_speed))
        return min(candidates, key=lambda s: s.position) if candidates else None

    def _cav_leader(self) -> Optional[VehicleState]:
        ahead = [
            VehicleState(float(p), float(v))
            for p, v in zip(self.positions, self.speeds)
            if p > self.cav_axis_position
        ]
        return min(ahead, key=lambda s: s.position) if ahead else None

    def observations(self) -> np.ndarray:
        """(N, 8) raw observation tuples for the current step."""
        obs = np.zeros((self.num_hdvs, OBSERVATION_SIZE))
        for n in range(self.num_hdvs):
            p, v = self.positions[n], self.speeds[n]
            if n > 0:
                lead = (self.positions[n - 1], self.speeds[n - 1])
            else:
                lead = (p + SENTINEL_DISTANCE, v)
            if n + 1 < self.num_hdvs:
                follow = (self.positions[n + 1], self.speeds[n + 1])
            else:
                follow = (p - SENTINEL_DISTANCE, v)
            if self.has_cav:
                cav = (self.cav_axis_position, self.cav_speed)
            else:
                cav = (p - SENTINEL_DISTANCE, v)
            obs[n] = (lead[0], lead[1], p, v, follow[0], follow[1], cav[0], cav[1])
        return obs

    # -- dynamics ---------------------------------------------------------

    def merge_cav(self) -> None:
        """Move the CAV from the ramp onto the highway lane."""
        if self.has_cav and not self.cav_merged:
            self.cav_merged = True
            self.cav_merge_step = self.step_index
            self._check_collisions()

    def _record(self) -> None:
        t = self.step_index
        self._pos_hist[:, t] = self.positions
        self._spd_hist[:, t] = self.speeds
        self._obs_hist[:, t] = self.observations()
        if self.has_cav:
            self._cav_hist[0, t] = self.cav_position
            self._cav_hist[1, t] = self.cav_speed

    def _check_collisions(self) -> None:
        vehicles = list(self.positions)
        if self.cav_merged:
            vehicles.append(self.cav_axis_position)
        ordered = np.sort(np.asarray(vehicles))[::-1]
        if ordered.size > 1 and np.any(ordered[:-1] - ordered[1:] - VEHICLE_LENGTH <= 0):
            if not self.collided:
                logger.warning("collision in scenario %d at step %d", self.scenario.seed, self.step_index)
            self.collided = True

    def step(self, cav_accel: Optional[float] = None, cav_trajectory: Optional[CubicCoeffs] = None) -> None:
        """
        Advance every vehicle by one sampling step (double integrator).

        Args:
            cav_accel:      CAV command while on the ramp; ignored after merging.
            cav_trajectory: Cubic (relative to the current CAV position and the
                            current time) the ramp CAV follows exactly over the
                            step; takes precedence over `cav_accel`.
        """
        if self.step_index >= self.config.horizon_steps:
            raise EngineError("episode horizon already reached")
        dt = self.config.dt
        noise = self._rng.standard_normal(self.num_hdvs) * self._noise_std

        accels = np.zeros(self.num_hdvs)
        for n, driver in enumerate(self.drivers):
            own = VehicleState(float(self.positions[n]), float(self.speeds[n]))
            u = idm_accel(own, self._leader_of(n), driver)
            if self.has_cav and not self.cav_merged:
                u -= altruism_decrement(own.position - self.cav_axis_position, driver.rho, driver.alpha)
            u = min(max(u + noise[n], driver.accel_min), driver.accel_max)
            if own.speed + u * dt < SPEED_FLOOR:
                u = (SPEED_FLOOR - own.speed) / dt
            accels[n] = u

        cav_u = 0.0
        cav_next: Optional[Tuple[float, float]] = None
        if self.has_cav:
            if self.cav_merged:
                cav_u = idm_accel(VehicleState(self.cav_axis_position, self.cav_speed),
                                  self._cav_leader(), self._cav_driver)
                cav_u = min(max(cav_u, self.config.u_min), self.config.u_max)
            elif cav_trajectory is not None:
                moved, speed, _ = eval_trajectory(cav_trajectory, dt)
                cav_u = float(eval_trajectory(cav_trajectory, 0.0)[2])
                cav_next = (self.cav_position + float(moved), float(speed))
            else:
                cav_u = 0.0 if cav_accel is None else float(cav_accel)
            if cav_next is None and self.cav_speed + cav_u * dt < SPEED_FLOOR:
                cav_u = (SPEED_FLOOR - self.cav_speed) / dt

        self._acc_hist[:, self.step_index] = accels
        self.positions = self.positions + self.speeds * dt + 0.5 * accels * dt * dt
        self.speeds = self.speeds + accels * dt
        if self.has_cav:
            self._cav_hist[2, self.step_index] = cav_u
            if cav_next is None:
                cav_next = (self.cav_position + self.cav_speed * dt + 0.5 * cav_u * dt * dt,
                            self.cav_speed + cav_u * dt)
            self.cav_position, self.cav_speed = cav_next

        self.step_index += 1
        self._record()
        self._check_collisions()

    # -- output -----------------------------------------------------------

    def trace(self) -> ScenarioTrace:
        """Snapshot of everything recorded so far."""
        steps = self.step_index + 1
        positions = self._pos_hist[:, :steps].copy()
        arrivals = tuple(arrival_times_from_positions(row, self.config) for row in positions)
        cav = self._cav_hist[:, :steps].copy() if self.has_cav else None
        return ScenarioTrace(
            seed=self.scenario.seed,
            config=self.config,
            hdv_positions=positions,
            hdv_speeds=self._spd_hist[:, :steps].copy(),
            hdv_accels=self._acc_hist[:, :steps].copy(),
            observations=self._obs_hist[:, :steps].copy(),
            arrivals=arrivals,
            cav_positions=None if cav is None else cav[0],
            cav_speeds=None if cav is None else cav[1],
            cav_accels=None if cav is None else np.nan_to_num(cav[2]),
            cav_merge_step=self.cav_merge_step,
            collision=self.collided,
            drivers=self.drivers,
        )


CavPolicy = Callable[[int, TrafficSimulator], Optional[float]]


@dataclass
class CruisePolicy:
    """
    Data-generation CAV: tracks a target speed with a proportional law and
    merges when it reaches its assigned candidate.
    """
    target_speed: float
    merge_candidate: int
    config: ZoneConfig
    gain: float = 0.5

    def __call__(self, step: int, sim: TrafficSimulator) -> Optional[float]:
        candidates = self.config.candidate_positions
        merge_at = candidates[min(self.merge_candidate, len(candidates) - 1)]
        if not sim.cav_merged and sim.cav_position >= merge_at:
            sim.merge_cav()
            return None
        accel = self.gain * (self.target_speed - sim.cav_speed)
        return min(max(accel, self.config.u_min), self.config.u_max)


def rollout(
    scenario: Scenario,
    cav_policy: Optional[CavPolicy],
    config: ZoneConfig,
    seed: Optional[int] = None,
) -> ScenarioTrace:
    """
    Simulate a full episode.

    Args:
        scenario:   Initial states and driver parameters.
        cav_policy: Called once per step with (step, simulator); returns the CAV
                    acceleration. None runs the episode without a CAV.
        config:     Zone geometry and horizon.
        seed:       Noise seed; defaults to the scenario seed.

    Returns:
        The recorded ScenarioTrace; a collision ends the episode early and sets
        `collision=True`.
    """
    sim = TrafficSimulator(scenario, config, with_cav=cav_policy is not None, noise_seed=seed)
    while sim.step_index < config.horizon_steps and not sim.collided:
        accel = cav_policy(sim.step_index, sim) if cav_policy is not None else None
        sim.step(accel)
    return sim.trace()


def generate_traces(
    seeds,
    template: ScenarioTemplate,
    config: ZoneConfig,
    with_cav: bool = True,
    skip_collisions: bool = True,
) -> list[ScenarioTrace]:
    """
    Roll out one scenario per seed with the cruise CAV policy.

    Collided episodes are dropped (and logged) when `skip_collisions` is set;
    rejection keeps the remaining traces i.i.d.
    """
    traces = []
    for seed in seeds:
        scenario = sample_scenario(int(seed), template)
        policy = None
        if with_cav:
            policy = CruisePolicy(scenario.cav_target_speed, scenario.cav_merge_candidate, config)
        trace = rollout(scenario, policy, config)
        if trace.collision and skip_collisions:
            logger.warning("dropping collided scenario %d", seed)
            continue
        traces.append(trace)
    return traces
