"""
SQLAlchemy ORM Models for the merge evaluation service.

Tables:
  - evaluation_sessions: One batch evaluation or coverage check
  - episode_records    : Closed-loop episodes of a batch session
  - coverage_records   : Per-candidate coverage of a coverage session
"""

import uuid
from datetime import datetime, timezone

from sqlalchemy import (
    Boolean,
    Column,
    DateTime,
    Float,
    ForeignKey,
    Integer,
    String,
    Text,
)
from sqlalchemy.orm import DeclarativeBase, relationship


def _generate_uuid() -> str:
    return str(uuid.uuid4())


class Base(DeclarativeBase):
    """Base class for all ORM models."""
    pass


# ---------------------------------------------------------------------------
# Evaluation Session
# ---------------------------------------------------------------------------
class EvaluationSession(Base):
    __tablename__ = "evaluation_sessions"

    id = Column(String, primary_key=True, default=_generate_uuid)
    kind = Column(String, nullable=False, doc="batch | coverage")
    label = Column(String, nullable=False, doc="Uploaded filename or predictor kind")
    epsilon = Column(Float, nullable=False, doc="Miscoverage level of the table")
    sample_size = Column(Integer, nullable=False, doc="Episodes or test trajectories")
    headline = Column(Float, nullable=True, doc="Violation rate (batch) or pooled coverage")
    processing_time = Column(Float, nullable=False, doc="Processing duration in seconds")
    raw_summary = Column(Text, nullable=False, doc="Full report as JSON string")
    created_at = Column(
        DateTime,
        default=lambda: datetime.now(timezone.utc),
        doc="Timestamp of the run",
    )

    episodes = relationship(
        "EpisodeRecord",
        back_populates="session",
        cascade="all, delete-orphan",
        lazy="selectin",
    )
    coverage = relationship(
        "CoverageRecord",
        back_populates="session",
        cascade="all, delete-orphan",
        lazy="selectin",
    )

    def __repr__(self) -> str:
        return f"<EvaluationSession {self.id} kind={self.kind}>"


# ---------------------------------------------------------------------------
# Episode Record
# ---------------------------------------------------------------------------
class EpisodeRecord(Base):
    __tablename__ = "episode_records"

    id = Column(String, primary_key=True, default=_generate_uuid)
    session_id = Column(
        String,
        ForeignKey("evaluation_sessions.id", ondelete="CASCADE"),
        nullable=False,
    )
    seed = Column(Integer, nullable=False)
    mode = Column(String, nullable=False, doc="conformal | oracle")
    merged = Column(Boolean, nullable=False)
    candidate = Column(Integer, nullable=True, doc="0-based merging candidate")
    merge_time = Column(Float, nullable=True, doc="Realized merge time (s)")
    violation = Column(Boolean, nullable=False, doc="Any headway below delta")
    collision = Column(Boolean, nullable=False)
    failed_reason = Column(String, nullable=True)

    session = relationship("EvaluationSession", back_populates="episodes")

    def __repr__(self) -> str:
        return f"<EpisodeRecord seed={self.seed} mode={self.mode}>"


# ---------------------------------------------------------------------------
# Coverage Record
# ---------------------------------------------------------------------------
class CoverageRecord(Base):
    __tablename__ = "coverage_records"

    id = Column(String, primary_key=True, default=_generate_uuid)
    session_id = Column(
        String,
        ForeignKey("evaluation_sessions.id", ondelete="CASCADE"),
        nullable=False,
    )
    candidate = Column(Integer, nullable=False)
    coverage = Column(Float, nullable=True, doc="Hit rate over the candidate's cells")
    spearman_rho = Column(Float, nullable=True, doc="Trend of mean score over time")

    session = relationship("EvaluationSession", back_populates="coverage")

    def __repr__(self) -> str:
        return f"<CoverageRecord candidate={self.candidate} coverage={self.coverage}>"
