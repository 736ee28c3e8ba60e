"""
FastAPI routes for stored evaluation sessions.

Endpoints:
    GET    /api/sessions       - List past sessions (summaries)
    GET    /api/sessions/{id}  - Session detail with episodes / coverage rows
    DELETE /api/sessions/{id}  - Delete a session (cascading)
"""

from fastapi import APIRouter, Depends, HTTPException, status
from sqlalchemy.orm import Session

from db.database import get_db
from db.models import EvaluationSession
from db.schemas import SessionDetailOut, SessionSummaryOut

router = APIRouter(prefix="/api/sessions", tags=["sessions"])


def _get_or_404(db: Session, session_id: str) -> EvaluationSession:
    session = db.query(EvaluationSession).filter(EvaluationSession.id == session_id).first()
    if not session:
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"Session {session_id} not found",
        )
    return session


# ---------------------------------------------------------------
# GET /api/sessions - List all sessions (summary only)
# ---------------------------------------------------------------
@router.get(
    "",
    response_model=list[SessionSummaryOut],
    summary="List past sessions",
)
def list_sessions(kind: str | None = None, db: Session = Depends(get_db)):
    """Most recent first; `kind` filters to batch or coverage sessions."""
    query = db.query(EvaluationSession)
    if kind:
        query = query.filter(EvaluationSession.kind == kind)
    return query.order_by(EvaluationSession.created_at.desc()).all()


# ---------------------------------------------------------------
# GET /api/sessions/{session_id}
# ---------------------------------------------------------------
@router.get(
    "/{session_id}",
    response_model=SessionDetailOut,
    summary="Get session detail",
)
def get_session(session_id: str, db: Session = Depends(get_db)):
    return _get_or_404(db, session_id)


# ---------------------------------------------------------------
# DELETE /api/sessions/{session_id}
# ---------------------------------------------------------------
@router.delete(
    "/{session_id}",
    status_code=status.HTTP_200_OK,
    summary="Delete a session",
)
def delete_session(session_id: str, db: Session = Depends(get_db)):
    """Deletes a session and its episode / coverage rows."""
    db.delete(_get_or_404(db, session_id))
    db.commit()
    return {"detail": f"Session {session_id} deleted successfully"}
