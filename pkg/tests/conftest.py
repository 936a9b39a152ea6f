"""Shared fixtures: tiny model configs, perturbed models and an isolated settings env."""

from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from app.config import get_settings
from app.schemas.config import ModelConfig
from app.services.flow_model import FlowModel, build_model
from app.services.rng import make_rng


def _small_config(scheme: str = "nanoflow", **overrides) -> ModelConfig:
    fields = dict(scheme=scheme, layout="flat", data_shape=[4], flows=3, groups=2, hidden=8, depth=2, seed=0)
    if scheme == "nanoflow":
        fields["embedding_dim"] = 4
    fields.update(overrides)
    return ModelConfig(**fields)


def _image_config(scheme: str = "nanoflow", **overrides) -> ModelConfig:
    fields = dict(layout="image", data_shape=[1, 4, 4], groups=2, flows=2, hidden=8, depth=2, scales=2)
    fields.update(overrides)
    return _small_config(scheme, **fields)


def _perturb(model: FlowModel, std: float = 0.1, seed: int = 7, match: str = ".head.") -> FlowModel:
    """Randomize every parameter whose name contains ``match`` (heads start at zero)."""
    rng = make_rng(seed, "test-perturb")
    return model.with_arrays({
        name: arr + std * rng.standard_normal(arr.shape) if match in name else arr
        for name, arr in model.store.arrays.items()
    })


@pytest.fixture
def make_config() -> Callable[..., ModelConfig]:
    return _small_config


@pytest.fixture
def make_image_config() -> Callable[..., ModelConfig]:
    return _image_config


@pytest.fixture
def perturb() -> Callable[..., FlowModel]:
    return _perturb


@pytest.fixture
def flat_model() -> FlowModel:
    return _perturb(build_model(_small_config()))


@pytest.fixture
def batch() -> np.ndarray:
    return np.random.default_rng(0).standard_normal((16, 4))


@pytest.fixture
def isolated_settings(tmp_path, monkeypatch):
    """Point output and checkpoint roots at tmp_path for the duration of a test."""
    model_dir = tmp_path / "checkpoints"
    model_dir.mkdir()
    monkeypatch.setenv("NANOFLOW_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("NANOFLOW_MODEL_DIR", str(model_dir))
    get_settings.cache_clear()
    yield get_settings()
    get_settings.cache_clear()
