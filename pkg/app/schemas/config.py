"""Declarative configuration documents: model, training, dataset and experiment."""

from __future__ import annotations

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt, model_validator

from app.errors import ConfigurationError

Scheme = Literal["baseline", "naive", "decomp", "nanoflow"]
Layout = Literal["flat", "seq", "image"]
Injection = Literal["concat", "additive", "gate"]
CouplingKind = Literal["affine", "rq_spline"]
Permutation = Literal["reverse", "inv_conv"]

SCHEMES: tuple[str, ...] = ("baseline", "naive", "decomp", "nanoflow")

DEFAULT_INJECTION: dict[str, tuple[str, ...]] = {
    "flat": ("additive", "gate"),
    "seq": ("additive", "gate"),
    "image": ("concat", "gate"),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scheme: Scheme = "nanoflow"
    layout: Layout = "flat"
    data_shape: list[PositiveInt] = Field(default_factory=lambda: [2])
    flows: PositiveInt = 8                       # K (per scale for images)
    groups: PositiveInt = 2                      # G
    hidden: PositiveInt = 64                     # H
    depth: PositiveInt = 4                       # L
    embedding_dim: PositiveInt | None = None     # D, nanoflow only
    injection: list[Injection] | None = None
    per_flow_projection: bool = False
    coupling: CouplingKind = "affine"
    bins: int = Field(default=8, ge=2)
    tail_bound: PositiveFloat = 3.0
    permutation: Permutation | None = None
    actnorm: bool | None = None
    scales: PositiveInt = 2
    shared_layers: NonNegativeInt | None = None
    head_kernel: Literal[1, 3] = 1
    seed: NonNegativeInt = 0

    # ── Resolved views ───────────────────────────────────────────────────────
    @property
    def injection_modes(self) -> frozenset[str]:
        if self.scheme != "nanoflow":
            return frozenset()
        if self.injection is None:
            return frozenset(DEFAULT_INJECTION[self.layout])
        return frozenset(self.injection)

    @property
    def permutation_strategy(self) -> str:
        if self.permutation is not None:
            return self.permutation
        return "inv_conv" if self.layout == "image" else "reverse"

    @property
    def use_actnorm(self) -> bool:
        if self.actnorm is not None:
            return self.actnorm
        return self.layout == "image"

    @property
    def num_scales(self) -> int:
        return self.scales if self.layout == "image" else 1

    @property
    def effective_shared_layers(self) -> int:
        if self.scheme == "baseline":
            return 0
        return self.depth if self.shared_layers is None else self.shared_layers

    @property
    def dims(self) -> int:
        return math.prod(self.data_shape)

    def grid_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, rows, cols) seen by the estimator at each scale."""
        if self.layout in ("flat", "seq"):
            return [(1, self.groups, self.data_shape[0] // self.groups)]
        c, h, w = self.data_shape
        shapes = []
        for s in range(self.scales):
            c, h, w = c * 4, h // 2, w // 2
            shapes.append((c, h, w))
            c //= 2
        return shapes

    def check(self) -> "ModelConfig":
        """Cross-field validation; raises ConfigurationError."""
        expected_rank = 3 if self.layout == "image" else 1
        if len(self.data_shape) != expected_rank:
            raise ConfigurationError(
                f"layout {self.layout!r} needs a rank-{expected_rank} data_shape, got {self.data_shape}"
            )
        if self.layout == "image":
            _, h, w = self.data_shape
            if self.groups != 2:
                raise ConfigurationError("image layouts use a bipartite channel split (groups=2)")
            if h % (2 ** self.scales) or w % (2 ** self.scales):
                raise ConfigurationError(
                    f"spatial size {h}x{w} is not divisible by 2^{self.scales} for {self.scales} scales"
                )
        else:
            if self.groups < 2:
                raise ConfigurationError("group count G must be at least 2")
            if self.data_shape[0] % self.groups:
                raise ConfigurationError(
                    f"G={self.groups} does not divide the partitioned axis of length {self.data_shape[0]}"
                )

        if self.scheme != "nanoflow":
            if self.embedding_dim is not None:
                raise ConfigurationError(f"embedding_dim is only valid for nanoflow, not {self.scheme}")
            if self.injection:
                raise ConfigurationError(f"injection modes are only valid for nanoflow, not {self.scheme}")
            if self.per_flow_projection:
                raise ConfigurationError("per_flow_projection is only valid for nanoflow")
        else:
            if self.embedding_dim is None:
                raise ConfigurationError("nanoflow needs embedding_dim (D)")
            if not self.injection_modes:
                raise ConfigurationError("nanoflow needs at least one injection mode")
            if self.per_flow_projection and "additive" not in self.injection_modes:
                raise ConfigurationError("per_flow_projection needs the additive injection mode")
            if "concat" in self.injection_modes:
                for _, rows, cols in self.grid_shapes():
                    if self.embedding_dim % (rows * cols):
                        raise ConfigurationError(
                            f"concat embedding: D={self.embedding_dim} is not divisible by {rows}x{cols}"
                        )

        if self.shared_layers is not None:
            if self.scheme == "baseline" and self.shared_layers != 0:
                raise ConfigurationError("baseline shares no layers (shared_layers must be 0)")
            if self.shared_layers > self.depth:
                raise ConfigurationError(
                    f"shared_layers={self.shared_layers} exceeds trunk depth {self.depth}"
                )
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iterations: NonNegativeInt = 5000
    batch_size: PositiveInt = 64
    learning_rate: PositiveFloat = 1e-3
    halve_every: PositiveInt = 2000
    checkpoint_every: PositiveInt = 200
    average_window: PositiveInt = 5
    grad_clip: PositiveFloat = 100.0
    log_every: PositiveInt = 100
    eval_size: PositiveInt = 512
    seed: NonNegativeInt = 0

    @model_validator(mode="after")
    def _window_fits(self) -> "TrainConfig":
        if self.iterations and self.average_window * self.checkpoint_every > self.iterations:
            raise ValueError(
                "average_window x checkpoint_every must not exceed iterations "
                f"({self.average_window} x {self.checkpoint_every} > {self.iterations})"
            )
        return self


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["two_moons", "rings", "gaussian_grid", "seq1d", "image_patches"] = "two_moons"
    n: PositiveInt = 10000
    length: PositiveInt = 256
    ar_coeffs: tuple[float, float] = (0.9, -0.2)
    path: str | None = None
    patch: PositiveInt = 8
    channels: PositiveInt = 1
    seed: NonNegativeInt = 0


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schemes: list[Scheme] | None = None
    groups: list[PositiveInt] | None = None
    shared_layers: list[NonNegativeInt] | None = None
    flows: list[PositiveInt] | None = None
    couplings: list[CouplingKind] | None = None
    head_kernels: list[Literal[1, 3]] | None = None


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: Literal[
        "train",
        "scheme_comparison",
        "llr_sweep",
        "shared_layers_ablation",
        "k_scaling",
        "coupling_comparison",
    ] = "train"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    seeds: list[NonNegativeInt] = Field(default_factory=lambda: [0, 1, 2])
    output_dir: str | None = None
