"""
main.py – FastAPI entry point for the NanoFlow inspection service.

Serves parameter ledgers, samples and exact log-likelihoods for checkpoints
stored under NANOFLOW_MODEL_DIR. Every response is JSON: library errors map
to 422, anything else to 500 through the catch-all handler.
"""

from __future__ import annotations

import logging
import os
import time
import traceback
from contextlib import asynccontextmanager
from pathlib import Path

import uvicorn
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app import __version__
from app.api.routes import router
from app.config import configure_logging, get_settings
from app.errors import NanoFlowError

configure_logging()
logger = logging.getLogger(__name__)


def _checkpoints(root: str) -> list[str]:
    """Checkpoint directories (those holding a manifest) below root."""
    base = Path(root)
    if not base.is_dir():
        return []
    return sorted(str(p.parent.relative_to(base)) for p in base.rglob("manifest.json"))


@asynccontextmanager
async def lifespan(_: FastAPI):
    settings = get_settings()
    found = _checkpoints(settings.MODEL_DIR)
    logger.info("🚀 NanoFlow inspection %s starting", __version__)
    logger.info("   model dir   : %s (%d checkpoints)", settings.MODEL_DIR, len(found))
    logger.info("   origins     : %s", ", ".join(settings.origins))
    if not found:
        logger.warning("⚠️ no checkpoints under %s; /sample and /log-likelihood will 404", settings.MODEL_DIR)
    yield
    logger.info("👋 NanoFlow inspection stopped")


# ── App ───────────────────────────────────────────────────────────────────────
app = FastAPI(
    title="NanoFlow Inspection API",
    description="Parameter ledgers, sampling and exact log-likelihoods for trained flow checkpoints.",
    version=__version__,
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=get_settings().origins,
    allow_credentials=True,
    allow_methods=["GET", "HEAD", "POST"],
    allow_headers=["*"],
)


# ── Error mapping ─────────────────────────────────────────────────────────────
@app.exception_handler(NanoFlowError)
async def library_error_handler(request: Request, exc: NanoFlowError) -> JSONResponse:
    logger.error("❌ %s on %s: %s", type(exc).__name__, request.url.path, exc)
    return JSONResponse(status_code=422, content={"detail": str(exc), "error": type(exc).__name__})


@app.exception_handler(Exception)
async def unhandled_error_handler(request: Request, exc: Exception) -> JSONResponse:
    logger.critical("💥 unhandled %s on %s %s\n%s",
                    type(exc).__name__, request.method, request.url.path, traceback.format_exc())
    return JSONResponse(
        status_code=500,
        content={"detail": f"{type(exc).__name__}: {exc}", "path": request.url.path},
    )


@app.middleware("http")
async def timing(request: Request, call_next):
    started = time.perf_counter()
    response = await call_next(request)
    ms = (time.perf_counter() - started) * 1000
    log = logger.warning if response.status_code >= 400 else logger.info
    log("%s %s -> %d (%.1f ms)", request.method, request.url.path, response.status_code, ms)
    response.headers["X-Elapsed-Ms"] = f"{ms:.1f}"
    return response


app.include_router(router, prefix="/api/v1")


# ── Liveness ──────────────────────────────────────────────────────────────────
@app.api_route("/", methods=["GET", "HEAD"], tags=["Root"])
async def root():
    return {"status": "ok", "service": "nanoflow-inspection", "version": __version__}


@app.api_route("/health", methods=["GET", "HEAD"], tags=["Health"])
async def health_check():
    model_dir = get_settings().MODEL_DIR
    return {
        "status": "ok",
        "model_dir": model_dir,
        "checkpoints": _checkpoints(model_dir),
    }


if __name__ == "__main__":
    port = int(os.environ.get("PORT", get_settings().PORT))
    logger.info("▶  serving on port %d", port)
    uvicorn.run("app.main:app", host="0.0.0.0", port=port, reload=False)
