"""
Run configuration.

A single JSON document validated by pydantic:

    {
      "zone":      {...},   control-zone geometry, CAV limits, epsilon
      "template":  {...},   scenario sampling ranges
      "predictor": {...},   model choice and training hyperparameters
      "seeds":     {...},   base seed and split sizes
      "paths":     {...},   artifact locations
      "workers":   1,
      "monotonize": false
    }

Every field has a default, so `{}` is a valid configuration. The engine uses
frozen dataclasses; to_zone() / to_template() / to_hyper() convert.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from backend.app.engine.core import EngineError, ZoneConfig
from backend.app.engine.hdv_sim import ScenarioTemplate
from backend.app.engine.predictors.recurrent import TrainingHyper


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ZoneSettings(_Section):
    """Control zone; candidates sit at first_candidate + candidate_spacing * l."""
    dt: float = Field(0.1, gt=0, description="Sampling time (s)")
    horizon_steps: int = Field(150, ge=1, description="Last step index T of an episode")
    first_candidate: float = Field(100.0, description="Position of candidate 0, ramp coordinates (m)")
    candidate_spacing: float = Field(10.0, gt=0, description="Distance between candidates (m)")
    num_candidates: int = Field(10, ge=1, description="Number of merging candidates L")
    headway_delta: float = Field(1.0, ge=0, description="Required time headway (s)")
    v_min: float = Field(5.0, gt=0, description="CAV minimum speed (m/s)")
    v_max: float = Field(35.0, gt=0, description="CAV maximum speed (m/s)")
    u_min: float = Field(-4.0, lt=0, description="CAV minimum acceleration (m/s^2)")
    u_max: float = Field(3.0, gt=0, description="CAV maximum acceleration (m/s^2)")
    epsilon: float = Field(0.1, gt=0, lt=1, description="Miscoverage level of the conformal bounds")
    lane_offset: float = Field(0.0, description="Ramp to highway coordinate shift (m)")
    merge_speed_resolution: float = Field(0.25, gt=0, description="Merge-speed grid step (m/s)")
    endpoint_nudge: float = Field(1e-3, ge=0, description="Fraction of dt added past forbidden intervals")

    @model_validator(mode="after")
    def _check_limits(self) -> "ZoneSettings":
        if self.v_min > self.v_max:
            raise ValueError("v_min must not exceed v_max")
        return self

    def to_zone(self) -> ZoneConfig:
        return ZoneConfig.evenly_spaced(
            first=self.first_candidate,
            spacing=self.candidate_spacing,
            count=self.num_candidates,
            dt=self.dt,
            horizon_steps=self.horizon_steps,
            headway_delta=self.headway_delta,
            v_min=self.v_min,
            v_max=self.v_max,
            u_min=self.u_min,
            u_max=self.u_max,
            epsilon=self.epsilon,
            lane_offset=self.lane_offset,
            merge_speed_resolution=self.merge_speed_resolution,
            endpoint_nudge=self.endpoint_nudge,
        )


Range = Tuple[float, float]


class TemplateSettings(_Section):
    """Uniform sampling ranges (lo, hi); HDV 0 leads."""
    num_hdvs: int = Field(3, ge=0)
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

    @model_validator(mode="after")
    def _check_template(self) -> "TemplateSettings":
        try:
            self.to_template().validate()
        except EngineError as exc:
            raise ValueError(str(exc))
        return self

    def to_template(self) -> ScenarioTemplate:
        return ScenarioTemplate(**self.model_dump())


class PredictorSettings(_Section):
    kind: Literal["physics", "recurrent"] = "recurrent"
    optimizer: Literal["sgd", "adam"] = "sgd"
    learning_rate: float = Field(1e-3, ge=0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)
    seed: int = 0
    anchored: bool = Field(True, description="Encode the self position relative to candidate 0")

    def to_hyper(self) -> TrainingHyper:
        return TrainingHyper(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
        )


SPLITS = ("train", "calibration", "test", "evaluation")


class SeedSettings(_Section):
    """Disjoint consecutive seed ranges starting at `base`."""
    base: int = Field(0, ge=0)
    train: int = Field(1000, ge=0)
    calibration: int = Field(500, ge=0)
    test: int = Field(500, ge=0)
    evaluation: int = Field(200, ge=0)

    def ranges(self) -> Dict[str, range]:
        out = {}
        start = self.base
        for name in SPLITS:
            count = getattr(self, name)
            out[name] = range(start, start + count)
            start += count
        return out


class PathSettings(_Section):
    data: Path = Path("artifacts/trajectories.csv")
    model: Path = Path("artifacts/model.npz")
    table: Path = Path("artifacts/table.json")
    out_dir: Path = Path("artifacts")


class RunConfig(_Section):
    zone: ZoneSettings = ZoneSettings()
    template: TemplateSettings = TemplateSettings()
    predictor: PredictorSettings = PredictorSettings()
    seeds: SeedSettings = SeedSettings()
    paths: PathSettings = PathSettings()
    workers: int = Field(1, ge=1)
    monotonize: bool = Field(False, description="Replace table columns by their running minimum")


def format_validation_error(exc: ValidationError) -> List[str]:
    """One `dotted.path: message` line per error."""
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return lines


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Read and validate a config file; None gives the defaults."""
    if path is None:
        return RunConfig()
    return RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def config_reference() -> str:
    """JSON schema of RunConfig with every default."""
    return json.dumps(RunConfig.model_json_schema(), indent=2)
