"""
Evaluation Routes

POST /api/batch     - calibrate a predictor on simulated scenarios, run a
                      closed-loop batch and persist the report
POST /api/coverage  - upload a trajectory CSV (+ arrival sidecar), calibrate
                      the physics baseline on half of it and report coverage
"""

import json
import time
from typing import Optional

from fastapi import APIRouter, Depends, File, HTTPException, UploadFile, status
from sqlalchemy.orm import Session

from backend.app.config import PathSettings, ZoneSettings
from backend.app.engine.artifacts import jsonable, load_checkpoint
from backend.app.engine.core import EngineError
from backend.app.engine.pipeline import calibrated_batch, coverage_from_upload
from backend.app.engine.predictors.physics import PhysicsPredictor
from db.database import get_db
from db.models import CoverageRecord, EpisodeRecord, EvaluationSession
from db.schemas import BatchRequest

router = APIRouter(prefix="/api", tags=["evaluate"])


@router.post(
    "/batch",
    status_code=status.HTTP_200_OK,
    summary="Run a closed-loop batch evaluation",
)
def run_batch(payload: BatchRequest, db: Session = Depends(get_db)):
    """
    Runs every requested seed under conformal merge control (and, unless
    disabled, the oracle reference), then stores one episode row per run.
    """
    started = time.time()
    try:
        zone = payload.zone.to_zone()
        template = payload.template.to_template()
        if payload.predictor.kind == "physics":
            predictor = PhysicsPredictor(zone)
        else:
            predictor = load_checkpoint(PathSettings().model, zone)
        calibration = range(payload.calibration_seed, payload.calibration_seed + payload.calibration_size)
        report = calibrated_batch(
            zone,
            template,
            predictor,
            payload.seeds,
            calibration,
            include_oracle=payload.include_oracle,
            apply_monotonize=payload.monotonize,
        )
    except (EngineError, FileNotFoundError) as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e),
        )
    except Exception as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Batch evaluation failed: {str(e)}",
        )

    result = jsonable(report.to_dict())
    elapsed = round(time.time() - started, 3)
    result["processing_time_seconds"] = elapsed

    # ── Persist to database ───────────────────────────────────────
    session_record = EvaluationSession(
        kind="batch",
        label=predictor.kind,
        epsilon=zone.epsilon,
        sample_size=len(report.runs),
        headline=result["violation_rate"],
        processing_time=elapsed,
        raw_summary=json.dumps(result),
    )
    db.add(session_record)
    db.flush()

    for run in list(report.runs) + list(report.oracle_runs):
        summary = jsonable(run.summary())
        db.add(EpisodeRecord(
            session_id=session_record.id,
            seed=summary["seed"],
            mode=summary["mode"],
            merged=summary["merged"],
            candidate=summary["candidate"],
            merge_time=summary["merge_time"],
            violation=summary["violation"],
            collision=summary["collision"],
            failed_reason=summary["failed_reason"],
        ))

    db.commit()
    result["session_id"] = session_record.id
    return result


@router.post(
    "/coverage",
    status_code=status.HTTP_200_OK,
    summary="Upload trajectories and check conformal coverage",
)
def check_coverage(
    file: UploadFile = File(..., description="Trajectory CSV"),
    sidecar: Optional[UploadFile] = File(None, description="Arrival-time sidecar JSON"),
    db: Session = Depends(get_db),
):
    """
    The zone defaults apply; uploaded data must have been produced with the
    same control zone.
    """
    if not file.filename or not file.filename.lower().endswith(".csv"):
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Only CSV files are accepted. Please upload a .csv file.",
        )

    content = file.file.read()
    if not content:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Uploaded file is empty.",
        )
    sidecar_bytes = sidecar.file.read() if sidecar is not None else None

    started = time.time()
    zone = ZoneSettings().to_zone()
    try:
        result = jsonable(coverage_from_upload(content, sidecar_bytes or None, zone))
    except EngineError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=str(e),
        )
    except Exception as e:
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Coverage check failed: {str(e)}",
        )
    elapsed = round(time.time() - started, 3)
    result["processing_time_seconds"] = elapsed

    # ── Persist to database ───────────────────────────────────────
    session_record = EvaluationSession(
        kind="coverage",
        label=file.filename,
        epsilon=zone.epsilon,
        sample_size=result["test_trajectories"],
        headline=result["pooled"],
        processing_time=elapsed,
        raw_summary=json.dumps(result),
    )
    db.add(session_record)
    db.flush()

    trends = {row["candidate"]: row["spearman_rho"] for row in result["score_trend"]}
    for candidate, value in enumerate(result["per_candidate"]):
        db.add(CoverageRecord(
            session_id=session_record.id,
            candidate=candidate,
            coverage=value,
            spearman_rho=trends.get(candidate),
        ))

    db.commit()
    result["session_id"] = session_record.id
    return result
