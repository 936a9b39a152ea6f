"""Response schemas for the model inspection API."""

from __future__ import annotations

from pydantic import BaseModel

from app.schemas.results import ParameterLedger


class LedgerResponse(BaseModel):
    scheme: str
    ledger: ParameterLedger


class SampleResponse(BaseModel):
    checkpoint: str
    n: int
    temperature: float
    samples: list


class LogLikelihoodResponse(BaseModel):
    checkpoint: str
    log_likelihood: list[float]      # nats per record
    per_dim: list[float]             # nats per element
    mean_per_dim: float


class HealthResponse(BaseModel):
    status: str
    message: str
