"""
Conformal Merge Evaluation Service: FastAPI Application

Entrypoint: uvicorn backend.app.main:app --reload
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from db.database import init_db
from backend.app.routes.evaluate import router as evaluate_router
from backend.app.routes.sessions import router as sessions_router

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Create the DB tables on startup."""
    init_db()
    logger.info("database ready")
    yield


app = FastAPI(
    title="Conformal Merge Evaluation Service",
    description="Closed-loop on-ramp merging with conformal arrival-time bounds",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(sessions_router)
app.include_router(evaluate_router)


@app.get("/health", tags=["health"])
def health_check():
    return {"status": "ok"}
