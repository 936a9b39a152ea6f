"""
training.py
Maximum-likelihood training: Adam with a halving learning-rate schedule,
gradient-norm clipping, checkpoint averaging, uniform dequantization and bpd.
"""

from __future__ import annotations

import logging
import math
import time
import traceback
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NoReturn

import numpy as np

from app.errors import ContractError, DataError, DivergenceError, NanoFlowError, NumericError
from app.schemas.config import TrainConfig
from app.schemas.results import MetricsRow
from app.services.data import Dataset
from app.services.flow_model import FlowModel, count_parameters, save_checkpoint
from app.services.rng import make_rng
from app.services.tensor_core import GradTape, mean

logger = logging.getLogger(__name__)

DIVERGENCE_NLL = 1e6
LN2 = math.log(2.0)


# ── Optimizer ────────────────────────────────────────────────────────────────
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {grads[name].shape}, expected {p.shape}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        logger.warning("⚠️ non-finite gradient at step %d; update skipped", state.t + 1)
        return dict(params), state

    t = state.t + 1
    m, v, out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, AdamState(m=m, v=v, t=t)


def lr_schedule(iteration: int, initial_lr: float, halve_every: int) -> float:
    if halve_every <= 0:
        raise ContractError(f"halve_every must be positive, got {halve_every}")
    return initial_lr * 0.5 ** (iteration // halve_every)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(norm) or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def checkpoint_average(checkpoints: list[FlowModel]) -> FlowModel:
    """Elementwise mean of every parameter over checkpoints of one topology."""
    if not checkpoints:
        raise ContractError("checkpoint averaging needs at least one checkpoint")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        first.store.check_compatible(other.store.arrays)
    averaged = {
        name: np.mean(np.stack([c.store.arrays[name] for c in checkpoints]), axis=0)
        for name in first.store.arrays
    }
    return first.with_arrays(averaged)


# ── Dequantization and units ─────────────────────────────────────────────────
def dequantize(x_int: np.ndarray, levels: int = 256, rng: np.random.Generator | None = None) -> np.ndarray:
    """(x + u) / levels with u ~ U[0, 1); values land in [0, 1)."""
    x = np.asarray(x_int, dtype=np.float64)
    if (x != np.round(x)).any() or (x < 0).any() or (x >= levels).any():
        raise DataError(f"dequantize needs integers in 0..{levels - 1}")
    if rng is None:
        rng = make_rng(0, "dequantize")
    return (x + rng.random(x.shape)) / levels


def bpd(ll: float, dims: int, levels: int = 256) -> float:
    """Bits per dimension of a per-record log-likelihood measured on [0, 1)-scaled data."""
    return -(ll - dims * math.log(levels)) / (dims * LN2)


def evaluate(model: FlowModel, dataset: Dataset, limit: int | None = None, seed: int = 0) -> tuple[float, float | None]:
    """(mean LL in nats per element, bpd or None) on the test split."""
    x = dataset.test if limit is None else dataset.test[:limit]
    if dataset.integer_valued:
        x = dequantize(x, dataset.levels, make_rng(seed, "eval-dequantize"))
    ll = float(model.log_likelihood(x).data.mean())
    per_dim = ll / dataset.dims
    return per_dim, (bpd(ll, dataset.dims, dataset.levels) if dataset.integer_valued else None)


# ── Training loop ────────────────────────────────────────────────────────────
@dataclass
class TrainResult:
    model: FlowModel
    metrics: list[MetricsRow]
    snapshots: int


def _grads(model: FlowModel, batch: np.ndarray, dims: int) -> tuple[float, dict[str, np.ndarray]]:
    leaves = model.leaves(grad_enabled=True)
    with GradTape() as tape:
        loss = mean(model.log_likelihood(batch, leaves)) * (-1.0 / dims)
        found = tape.backward(loss)
    grads = {name: found.get(leaves[name], np.zeros(arr.shape)) for name, arr in model.store.arrays.items()}
    return loss.item(), grads


def _warn_saturated(gates: set[str], first: int, last: int) -> None:
    for name in sorted(gates):
        logger.warning("⚠️ gate %s saturated (|delta| > 30) during iters %d-%d", name, first, last)


def _write_metrics(path: Path | None, row: MetricsRow) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(row.model_dump_json() + "\n")


def train(
    model: FlowModel,
    dataset: Dataset,
    config: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainResult:
    """Minimize mean NLL per element; the returned model is the checkpoint average."""
    if dataset.record_shape != tuple(model.config.data_shape):
        raise ContractError(
            f"dataset records {dataset.record_shape} do not match model shape {tuple(model.config.data_shape)}"
        )
    metrics_path = Path(metrics_path) if metrics_path else None
    if metrics_path is not None and metrics_path.exists():
        metrics_path.unlink()

    batch_rng = make_rng(config.seed, "batches")
    noise_rng = make_rng(config.seed, "train-dequantize")
    dims = dataset.dims
    param_total = count_parameters(model).total
    metrics: list[MetricsRow] = []
    started = time.perf_counter()

    def prepare(idx: np.ndarray) -> np.ndarray:
        x = dataset.train[idx]
        return dequantize(x, dataset.levels, noise_rng) if dataset.integer_valued else x

    def emit(iteration: int, current: FlowModel, train_nll: float | None) -> None:
        eval_ll, eval_bpd = evaluate(current, dataset, config.eval_size, config.seed)
        row = MetricsRow(
            iteration=iteration,
            train_nll=train_nll,
            eval_ll=eval_ll,
            bpd=eval_bpd,
            wall_seconds=time.perf_counter() - started,
            param_total=param_total,
        )
        metrics.append(row)
        _write_metrics(metrics_path, row)
        logger.info(
            "   iter %6d | train_nll=%s | eval_ll=%.5f%s",
            iteration,
            "-" if train_nll is None else f"{train_nll:.5f}",
            eval_ll,
            "" if eval_bpd is None else f" | bpd={eval_bpd:.4f}",
        )

    if config.iterations == 0:
        emit(0, model, None)
        return TrainResult(model=model.copy(), metrics=metrics, snapshots=0)

    logger.info(
        "🚀 training %s | iters=%d batch=%d lr=%g params=%d",
        model.config.scheme, config.iterations, config.batch_size, config.learning_rate, param_total,
    )
    current = model.copy()
    if model.config.use_actnorm and not model.actnorm_initialized:
        current = current.initialize_actnorm(prepare(batch_rng.integers(0, len(dataset.train), config.batch_size)))

    state = AdamState.zeros_like(current.store.arrays)
    snapshots: deque[FlowModel] = deque(maxlen=config.average_window)
    window: list[float] = []
    saturated: set[str] = set()
    window_start = 1

    for it in range(1, config.iterations + 1):
        batch = prepare(batch_rng.integers(0, len(dataset.train), config.batch_size))
        try:
            loss, grads = _grads(current, batch, dims)
        except NumericError as exc:
            _diverge(current, batch, it, f"numeric failure: {exc}")
        if not math.isfinite(loss) or loss > DIVERGENCE_NLL:
            _diverge(current, batch, it, f"NLL {loss:.4g} exceeds {DIVERGENCE_NLL:g}")
        window.append(loss)

        grads, _ = clip_grad_norm(grads, config.grad_clip)
        lr = lr_schedule(it - 1, config.learning_rate, config.halve_every)
        arrays, state = adam_step(current.store.arrays, grads, state, lr)
        current = current.with_arrays(arrays)

        saturated.update(current.saturated_gates())

        if it % config.checkpoint_every == 0:
            snapshots.append(current.copy())
            if checkpoint_dir is not None:
                save_checkpoint(current, Path(checkpoint_dir) / f"iter_{it:07d}")

        if it % config.log_every == 0 or it == config.iterations:
            _warn_saturated(saturated, window_start, it)
            saturated.clear()
            window_start = it + 1
        if it % config.log_every == 0 and it < config.iterations:
            emit(it, current, float(np.mean(window)))
            window = []

    final = checkpoint_average(list(snapshots)) if snapshots else current
    emit(config.iterations, final, float(np.mean(window)) if window else None)
    logger.info("✅ training done | averaged %d checkpoints | %.1fs", len(snapshots), time.perf_counter() - started)
    return TrainResult(model=final, metrics=metrics, snapshots=len(snapshots))


def _diverge(model: FlowModel, batch: np.ndarray, iteration: int, reason: str) -> NoReturn:
    try:
        report = model.saturation_report(batch)
    except NanoFlowError:
        report = {}
    diagnostics = {"iteration": iteration, "reason": reason, "saturation": report}
    logger.error("❌ training diverged at iter %d: %s | saturation=%s\n%s",
                 iteration, reason, report, traceback.format_exc())
    raise DivergenceError(f"training diverged at iteration {iteration}: {reason}", diagnostics)
