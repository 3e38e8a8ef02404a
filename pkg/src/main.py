"""
FastAPI application serving IRAC collaboration decisions.
Provides REST endpoints for decisions, per-solver runs and monitoring.
"""

import logging
import os
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI, HTTPException, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from src.config import settings
from src.errors import DomainError, SolverError, ValidationFailure
from src.harness import SOLVER_NAMES, resolve_solvers
from src.instance import Instance, require_valid
from src.observability import configure_logging
from src.planner import get_planner
from src.pmm import Solution

configure_logging()
logger = logging.getLogger(__name__)

API_VERSION = "0.1.0"


class HealthResponse(BaseModel):
    """Health check response."""

    status: str
    environment: str
    model_loaded: bool
    fast_path_breaker: dict


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Load the planner (and its model, if configured) at startup."""
    logger.info("Starting IRAC decision service")
    logger.info("Environment: %s", settings.environment)
    try:
        get_planner()
    except Exception as exc:
        logger.error("Failed to initialize planner: %s", exc, exc_info=True)
    yield
    logger.info("Shutting down IRAC decision service")


app = FastAPI(
    title="IRAC Decision Service",
    description="Edge-collaborative rendering decisions: who offloads, at what power",
    version=API_VERSION,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(ValidationFailure)
@app.exception_handler(DomainError)
async def invalid_input_handler(request: Request, exc: Exception):
    logger.info("Rejected request to %s: %s", request.url.path, exc)
    return JSONResponse(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, content={"detail": str(exc)})


@app.get("/", tags=["Root"])
async def root():
    return {"message": "IRAC Decision Service", "version": API_VERSION, "docs": "/docs"}


@app.get("/health", response_model=HealthResponse, tags=["Health"])
async def health_check():
    """Service status, model availability and fast-path breaker state."""
    planner = get_planner()
    return HealthResponse(
        status="healthy",
        environment=settings.environment,
        model_loaded=planner.model is not None,
        fast_path_breaker=planner.breaker.get_state(),
    )


@app.post("/decide", response_model=Solution, tags=["Decisions"])
def decide(instance: Instance):
    """
    Collaboration bits and powers for one instance.

    Uses the learned fast path when a matching model is loaded and healthy,
    PMM otherwise; `meta.path` says which one answered.
    """
    try:
        return get_planner().decide(instance)
    except SolverError as exc:
        logger.error("Error in /decide: %s", exc, exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="The solver failed on this instance.",
        ) from exc


@app.post("/solve/{solver}", response_model=Solution, tags=["Decisions"])
def solve(solver: str, instance: Instance):
    """Run one named solver (pmm, greedy, brute_force, ...) on an instance."""
    if solver not in SOLVER_NAMES or solver == "ilo":
        raise HTTPException(
            status_code=status.HTTP_404_NOT_FOUND,
            detail=f"unknown solver {solver!r}; use /decide for the learned path",
        )
    require_valid(instance)
    try:
        return resolve_solvers([solver])[solver](instance)
    except SolverError as exc:
        logger.error("Error in /solve/%s: %s", solver, exc, exc_info=True)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="The solver failed on this instance.",
        ) from exc


@app.get("/ready")
def ready():
    return {"status": "ready"}


@app.get("/metrics", tags=["Monitoring"])
async def metrics():
    """Path usage counters and breaker state."""
    return {**get_planner().stats(), "environment": settings.environment}


def serve(host: str = "0.0.0.0", port: int | None = None) -> None:
    uvicorn.run(
        "src.main:app",
        host=host,
        port=port or int(os.environ.get("PORT", 8080)),
        reload=settings.environment == "development",
        log_level=settings.log_level.lower(),
    )


if __name__ == "__main__":
    serve()
