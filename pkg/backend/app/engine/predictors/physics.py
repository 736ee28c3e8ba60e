"""
Constant-speed baseline.

    mu_l = now + (p_l - p) / v      for candidates ahead of the vehicle
    mu_l = now                      for candidates at or behind it

Has no parameters; conformal calibration wraps it like any other model.
"""

from __future__ import annotations

from typing import Any, Union

import numpy as np

from ..core import VehicleState, ZoneConfig
from ..hdv_sim import SPEED_FLOOR
from .base import ArrivalPredictor


def physics_predict(
    latest: Union[VehicleState, np.ndarray],
    config: ZoneConfig,
    now: float = 0.0,
) -> np.ndarray:
    """
    Constant-speed extrapolation to every candidate.

    Args:
        latest: Latest VehicleState, or (B, 8) raw observations (self slot used).
        config: Zone geometry.
        now:    Current time (s).

    Returns:
        (L,) or (B, L) absolute predicted arrival times.
    """
    if isinstance(latest, VehicleState):
        p = np.asarray([latest.position])
        v = np.asarray([latest.speed])
        squeeze = True
    else:
        raw = np.atleast_2d(np.asarray(latest, dtype=np.float64))
        p, v = raw[:, 2], raw[:, 3]
        squeeze = False

    targets = config.highway_targets[None, :]
    remaining = targets - p[:, None]
    speed = np.maximum(v, SPEED_FLOOR)[:, None]
    mu = now + np.where(remaining > 0, remaining / speed, 0.0)
    return mu[0] if squeeze else mu


class PhysicsPredictor(ArrivalPredictor):
    """Batch wrapper around physics_predict."""

    kind = "physics"

    def _initial_model_state(self, batch: int) -> Any:
        return None

    def _advance(self, model_state: Any, raw: np.ndarray, now: float) -> Any:
        return None

    def _decode(self, model_state: Any, raw: np.ndarray, now: float) -> np.ndarray:
        return physics_predict(raw, self.config, now)

    def _fingerprint_payload(self) -> bytes:
        return b""
