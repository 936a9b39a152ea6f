"""Request schemas for the model inspection API."""

from pydantic import BaseModel, Field


class SampleRequest(BaseModel):
    checkpoint: str = Field(..., min_length=1, examples=["scheme/checkpoints/c03-s0"])
    n: int = Field(16, ge=0, le=4096)
    temperature: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)


class LogLikelihoodRequest(BaseModel):
    checkpoint: str = Field(..., min_length=1)
    data: list = Field(..., min_length=1, description="Records in the model's data layout")
