"""Result records: parameter ledgers, training metrics and experiment rows."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel


class ParameterLedger(BaseModel):
    trunk: int          # |θ̂|, |θ| or Σ|θ^k| (baseline/naive count their own output layers here)
    heads: int          # Σ|ε^k|
    embeddings: int     # Σ|e^k|
    injection: int      # W^l, δ^{k,l}, concat-channel weights
    flow_layers: int    # actnorm and 1x1-conv weights
    total: int
    buffers: int = 0    # cached additive biases; not trainable, not in total

    @property
    def estimator(self) -> int:
        return self.trunk + self.heads


class MetricsRow(BaseModel):
    iteration: int
    train_nll: float | None       # nats per element
    eval_ll: float | None         # nats per element
    bpd: float | None = None
    wall_seconds: float
    param_total: int

    def fingerprint(self) -> dict[str, Any]:
        """Everything except timing; identical across reruns with the same seed."""
        return self.model_dump(exclude={"wall_seconds"})


RESULT_COLUMNS: tuple[str, ...] = (
    "experiment",
    "combination",
    "scheme",
    "coupling",
    "groups",
    "flows",
    "shared_layers",
    "head_kernel",
    "seed",
    "param_total",
    "eval_ll",
    "eval_nll",
    "bpd",
    "runtime_seconds",
    "diverged",
)


class ResultRow(BaseModel):
    experiment: str
    combination: int
    scheme: str
    coupling: str
    groups: int
    flows: int
    shared_layers: int
    head_kernel: int
    seed: int
    param_total: int
    eval_ll: float | None
    eval_nll: float | None
    bpd: float | None
    runtime_seconds: float
    diverged: bool = False
