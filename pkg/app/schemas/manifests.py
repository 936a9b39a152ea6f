"""JSON manifests written next to NFTN tensor files (checkpoints and datasets)."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel

from app.schemas.config import ModelConfig


class TensorEntry(BaseModel):
    name: str
    file: str
    shape: list[int]
    category: str | None = None     # None marks a buffer


class CheckpointManifest(BaseModel):
    format: Literal["nanoflow-checkpoint"] = "nanoflow-checkpoint"
    version: int = 1
    config: ModelConfig
    cached: bool = False
    actnorm_initialized: bool = False
    tensors: list[TensorEntry]


class DatasetManifest(BaseModel):
    format: Literal["nanoflow-dataset"] = "nanoflow-dataset"
    version: int = 1
    kind: str
    seed: int
    integer_valued: bool
    train_size: int
    test_size: int
    record_shape: list[int]
    train_file: str = "train.nftn"
    test_file: str = "test.nftn"
