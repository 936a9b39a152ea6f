"""
routes.py – FastAPI routes for inspecting models and trained checkpoints.
"""

from __future__ import annotations

import logging
import traceback
from pathlib import Path
from typing import Callable, TypeVar

import numpy as np
from fastapi import APIRouter, HTTPException, status
from fastapi.concurrency import run_in_threadpool

from app.config import get_settings
from app.errors import NanoFlowError
from app.schemas.config import ModelConfig
from app.schemas.request import LogLikelihoodRequest, SampleRequest
from app.schemas.response import HealthResponse, LedgerResponse, LogLikelihoodResponse, SampleResponse
from app.services.flow_model import FlowModel, build_model, count_parameters, load_checkpoint

logger = logging.getLogger(__name__)
router = APIRouter()

T = TypeVar("T")

# status.HTTP_422_* is named differently before and after starlette 0.48
UNPROCESSABLE = 422


def resolve_checkpoint(name: str) -> Path:
    """Checkpoint directory under MODEL_DIR; rejects paths that escape it."""
    root = Path(get_settings().MODEL_DIR).resolve()
    path = (root / name).resolve()
    if not path.is_relative_to(root):
        logger.warning("⚠️ rejected checkpoint path outside model dir: %r", name)
        raise HTTPException(status_code=UNPROCESSABLE, detail="checkpoint path escapes the model directory")
    if not (path / "manifest.json").is_file():
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"checkpoint {name!r} not found")
    return path


async def _run(step: str, fn: Callable[..., T], *args) -> T:
    logger.info("🔄 STEP: %s …", step)
    try:
        result = await run_in_threadpool(fn, *args)
    except HTTPException:
        raise
    except NanoFlowError as exc:
        logger.error("❌ STEP: %s rejected: %s", step, exc)
        raise HTTPException(status_code=UNPROCESSABLE, detail=str(exc)) from exc
    except Exception as exc:
        logger.error("❌ STEP: %s FAILED with %s: %s\n%s", step, type(exc).__name__, exc, traceback.format_exc())
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"{step} error [{type(exc).__name__}]: {exc}",
        ) from exc
    logger.info("✅ STEP: %s done", step)
    return result


@router.get("/health", response_model=HealthResponse, summary="Health check", tags=["utility"])
async def health() -> HealthResponse:
    logger.info("✅ /health check called")
    return HealthResponse(status="ok", message="NanoFlow inspection service is running")


@router.post("/ledger", response_model=LedgerResponse, summary="Parameter ledger of a config", tags=["models"])
async def ledger_endpoint(body: ModelConfig) -> LedgerResponse:
    logger.info("📥 /ledger called | scheme=%s layout=%s K=%d", body.scheme, body.layout, body.flows)
    model = await _run("build model", build_model, body)
    return LedgerResponse(scheme=body.scheme, ledger=count_parameters(model))


@router.post("/sample", response_model=SampleResponse, summary="Draw samples from a checkpoint", tags=["models"])
async def sample_endpoint(body: SampleRequest) -> SampleResponse:
    logger.info("📥 /sample called | checkpoint=%r n=%d T=%.2f", body.checkpoint, body.n, body.temperature)
    path = resolve_checkpoint(body.checkpoint)
    model: FlowModel = await _run("load checkpoint", load_checkpoint, path)
    samples = await _run("sample", model.sample, body.n, body.temperature, body.seed)
    return SampleResponse(checkpoint=body.checkpoint, n=body.n, temperature=body.temperature, samples=samples.tolist())


@router.post(
    "/log-likelihood",
    response_model=LogLikelihoodResponse,
    summary="Exact log-likelihood of records under a checkpoint",
    tags=["models"],
)
async def log_likelihood_endpoint(body: LogLikelihoodRequest) -> LogLikelihoodResponse:
    logger.info("📥 /log-likelihood called | checkpoint=%r records=%d", body.checkpoint, len(body.data))
    path = resolve_checkpoint(body.checkpoint)
    model: FlowModel = await _run("load checkpoint", load_checkpoint, path)
    try:
        x = np.asarray(body.data, dtype=np.float64)
    except ValueError as exc:
        raise HTTPException(status_code=UNPROCESSABLE, detail="data is not a rectangular array") from exc
    ll = await _run("log-likelihood", lambda: model.log_likelihood(x).numpy())
    dims = model.config.dims
    per_dim = ll / dims
    return LogLikelihoodResponse(
        checkpoint=body.checkpoint,
        log_likelihood=ll.tolist(),
        per_dim=per_dim.tolist(),
        mean_per_dim=float(per_dim.mean()),
    )
