"""
Pydantic schemas for API request/response serialization.

Request bodies reuse the run configuration sections from
backend.app.config so the HTTP and CLI surfaces validate the same way.
"""

from __future__ import annotations

from datetime import datetime
from typing import Optional

from pydantic import BaseModel, Field

from backend.app.config import PredictorSettings, TemplateSettings, ZoneSettings


# ===================================================================
# Response Schemas
# ===================================================================

class EpisodeOut(BaseModel):
    """One closed-loop episode of a batch session."""
    seed: int
    mode: str = Field(..., examples=["conformal", "oracle"])
    merged: bool
    candidate: Optional[int] = None
    merge_time: Optional[float] = None
    violation: bool
    collision: bool
    failed_reason: Optional[str] = None

    model_config = {"from_attributes": True}


class CoverageOut(BaseModel):
    """Coverage of one merging candidate."""
    candidate: int
    coverage: Optional[float] = Field(None, ge=0, le=1)
    spearman_rho: Optional[float] = None

    model_config = {"from_attributes": True}


class SessionSummaryOut(BaseModel):
    """Lightweight session metadata for list views."""
    id: str
    kind: str
    label: str
    epsilon: float
    sample_size: int
    headline: Optional[float] = None
    processing_time: float
    created_at: datetime

    model_config = {"from_attributes": True}


class SessionDetailOut(SessionSummaryOut):
    """Full session data including episodes or per-candidate coverage."""
    raw_summary: str
    episodes: list[EpisodeOut] = []
    coverage: list[CoverageOut] = []


# ===================================================================
# Request Schemas
# ===================================================================

class BatchRequest(BaseModel):
    """
    Batch evaluation request. The physics predictor is calibrated on
    `calibration_size` freshly simulated scenarios, then every seed is run
    in closed loop.
    """
    zone: ZoneSettings = ZoneSettings()
    template: TemplateSettings = TemplateSettings()
    predictor: PredictorSettings = PredictorSettings(kind="physics")
    seeds: list[int] = Field(..., min_length=1, max_length=1000, examples=[[0, 1, 2]])
    calibration_seed: int = Field(1_000_000, ge=0, description="First calibration scenario seed")
    calibration_size: int = Field(200, ge=1, le=5000)
    include_oracle: bool = True
    monotonize: bool = False
