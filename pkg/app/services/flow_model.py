"""
flow_model.py
Assemble flow models for the four parameterization schemes from one ModelConfig,
account for their parameters, sample from them and persist them as checkpoints.
"""

from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.errors import ConfigurationError, ContractError, DataFormatError, NumericError
from app.schemas.config import ModelConfig
from app.schemas.manifests import CheckpointManifest, TensorEntry
from app.schemas.results import ParameterLedger
from app.services.coupling import (
    ActNormStep,
    CouplingStep,
    FactorOutStep,
    FlowComposition,
    FlowOutput,
    GroupPartition,
    PermutationStep,
    SqueezeStep,
    Stats,
    actnorm_data_init,
    factor_out,
    total_log_likelihood,
)
from app.services.estimator import Estimator
from app.services.parameters import ParameterStore
from app.services.rng import make_rng
from app.services.tensor_core import Tensor
from app.services.tensor_io import read_tensor, write_bytes, write_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


# ── Model ────────────────────────────────────────────────────────────────────
@dataclass
class FlowModel:
    config: ModelConfig
    store: ParameterStore
    composition: FlowComposition
    estimators: list[Estimator]
    cached: bool = False
    actnorm_initialized: bool = False
    grid_shape: tuple[int, int, int] = field(default=(1, 1, 1))

    # ── Layout ───────────────────────────────────────────────────────────────
    def to_grid(self, x: np.ndarray) -> np.ndarray:
        """Data-layout batch -> (N, C, rows, cols)."""
        x = np.asarray(x, dtype=np.float64)
        expected = tuple(self.config.data_shape)
        if x.shape[1:] != expected:
            raise ContractError(f"model expects records of shape {expected}, got {x.shape[1:]}")
        n, g = x.shape[0], self.config.groups
        if self.config.layout == "flat":
            return x.reshape(n, 1, g, -1)
        if self.config.layout == "seq":
            # column t holds samples t*G .. t*G+G-1; rows are the grouped axis
            return x.reshape(n, -1, g).transpose(0, 2, 1)[:, None].copy()
        return x

    def from_grid(self, grid: np.ndarray) -> np.ndarray:
        n = grid.shape[0]
        if self.config.layout == "flat":
            return grid.reshape(n, -1)
        if self.config.layout == "seq":
            return grid[:, 0].transpose(0, 2, 1).reshape(n, -1)
        return grid

    # ── Evaluation ───────────────────────────────────────────────────────────
    def leaves(self, grad_enabled: bool = False) -> dict[str, Tensor]:
        return self.store.leaves(grad_enabled)

    def forward(self, x: np.ndarray, leaves=None, stats: Stats | None = None) -> FlowOutput:
        leaves = self.leaves() if leaves is None else leaves
        return self.composition.forward(Tensor(self.to_grid(x)), leaves, stats)

    def log_likelihood(self, x: np.ndarray, leaves=None) -> Tensor:
        """Per-record log-density in nats, shape (N,)."""
        leaves = self.leaves() if leaves is None else leaves
        return total_log_likelihood(Tensor(self.to_grid(x)), self.composition, leaves)

    def inverse(self, z: Tensor, factored: list[Tensor], leaves=None) -> np.ndarray:
        leaves = self.leaves() if leaves is None else leaves
        return self.from_grid(self.composition.inverse(z, factored, leaves).numpy())

    def sample(self, n: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        """n draws: z ~ N(0, temperature^2 I) pushed through the inverse flows K..1."""
        if temperature <= 0:
            raise ContractError(f"temperature must be positive, got {temperature}")
        if n < 0:
            raise ContractError(f"sample count must be non-negative, got {n}")
        if n == 0:
            return np.zeros((0, *self.config.data_shape))
        rng = make_rng(seed, "sample")
        final_shape, factored_shapes = self.composition.latent_shapes((n, *self.grid_shape))
        z = Tensor(temperature * rng.standard_normal(final_shape))
        factored = [Tensor(temperature * rng.standard_normal(s)) for s in factored_shapes]
        return self.inverse(z, factored)

    def saturation_report(self, x: np.ndarray) -> dict[int, dict[str, float]]:
        """Per-flow max |log sigma| and count of entries past the clamp on batch x."""
        stats: Stats = {}
        try:
            self.forward(x, stats=stats)
        except NumericError as exc:
            logger.warning("⚠️ saturation report stopped early: %s", exc)
        return {flow: dict(values) for flow, values in sorted(stats.items())}

    # ── Derived models ───────────────────────────────────────────────────────
    def with_arrays(self, arrays) -> "FlowModel":
        return replace(self, store=self.store.with_arrays(arrays))

    def copy(self) -> "FlowModel":
        return replace(self, store=self.store.copy())

    def initialize_actnorm(self, x: np.ndarray) -> "FlowModel":
        """Data-dependent actnorm init on batch x; returns a new model."""
        out = self.copy()
        if not self.config.use_actnorm:
            out.actnorm_initialized = True
            return out
        h = Tensor(self.to_grid(x))
        leaves = out.leaves()
        for step in out.composition.steps:
            if isinstance(step, FactorOutStep):
                h, _, _ = factor_out(h)
                continue
            if isinstance(step, ActNormStep):
                scale, bias = actnorm_data_init(h.data)
                out.store.arrays[f"{step.prefix}.scale"] = scale
                out.store.arrays[f"{step.prefix}.bias"] = bias
                leaves = out.leaves()
            h, _ = step.forward(h, leaves)
        out.actnorm_initialized = True
        logger.info("✅ actnorm initialized from a batch of %d", len(x))
        return out

    def cache_additive_biases(self) -> "FlowModel":
        out = self.copy()
        removed = sum(est.cache_additive_biases(out.store) for est in out.estimators)
        out.cached = out.cached or removed > 0
        return out

    def saturated_gates(self) -> list[str]:
        return [name for est in self.estimators for name in est.saturated_gates(self.store)]


# ── Construction ─────────────────────────────────────────────────────────────
def _inv_conv_init(seed: int, name: str, channels: int) -> np.ndarray:
    q, _ = np.linalg.qr(make_rng(seed, name).standard_normal((channels, channels)))
    return q


def _flow_steps(
    config: ModelConfig,
    store: ParameterStore,
    estimator: Estimator,
    partition: GroupPartition,
    context_mode: str,
    scale: int,
) -> list:
    steps = []
    for k in range(1, config.flows + 1):
        flow = (scale - 1) * config.flows + k
        if config.use_actnorm:
            prefix = f"s{scale}.actnorm.f{k}"
            store.add(f"{prefix}.scale", np.ones(estimator.channels), "flow_layer")
            store.add(f"{prefix}.bias", np.zeros(estimator.channels), "flow_layer")
            steps.append(ActNormStep(flow=flow, prefix=prefix))
        if config.permutation_strategy == "inv_conv":
            prefix = f"s{scale}.invconv.f{k}"
            name = f"{prefix}.weight"
            store.add(name, _inv_conv_init(config.seed, name, estimator.channels), "flow_layer")
            steps.append(PermutationStep(flow=flow, partition=partition, strategy="inv_conv", prefix=prefix))
        else:
            steps.append(PermutationStep(flow=flow, partition=partition, strategy="reverse"))
        steps.append(
            CouplingStep(
                flow=flow,
                k=k,
                kind=config.coupling,
                partition=partition,
                context_mode=context_mode,
                estimate=estimator.estimate,
                bins=config.bins,
                tail_bound=config.tail_bound,
            )
        )
    return steps


def build_model(config: ModelConfig | dict) -> FlowModel:
    """Deterministic construction from config.seed; raises ConfigurationError."""
    if isinstance(config, dict):
        try:
            config = ModelConfig.model_validate(config)
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc
    config.check()

    store = ParameterStore()
    steps: list = []
    estimators: list[Estimator] = []
    shapes = config.grid_shapes()
    for scale, grid in enumerate(shapes, start=1):
        estimator = Estimator.from_config(config, scale, grid)
        estimator.register(store)
        estimators.append(estimator)
        channels, rows, _ = grid
        if config.layout == "image":
            steps.append(SqueezeStep())
            partition = GroupPartition(groups=2, axis=1, length=channels)
            steps.extend(_flow_steps(config, store, estimator, partition, "masked", scale))
            if scale < len(shapes):
                steps.append(FactorOutStep())
        else:
            partition = GroupPartition(groups=config.groups, axis=2, length=rows)
            steps.extend(_flow_steps(config, store, estimator, partition, "shifted", scale))

    if config.layout == "image":
        grid_shape = tuple(config.data_shape)
    else:
        grid_shape = shapes[0]
    model = FlowModel(
        config=config,
        store=store,
        composition=FlowComposition(steps),
        estimators=estimators,
        grid_shape=grid_shape,
    )
    logger.debug(
        "built %s model | layout=%s K=%d G=%d params=%d",
        config.scheme, config.layout, config.flows, config.groups, store.count(),
    )
    return model


def count_parameters(model: FlowModel) -> ParameterLedger:
    store = model.store
    parts = {
        "trunk": store.count("trunk"),
        "heads": store.count("head"),
        "embeddings": store.count("embedding"),
        "injection": store.count("injection"),
        "flow_layers": store.count("flow_layer"),
    }
    return ParameterLedger(
        **parts,
        total=sum(parts.values()),
        buffers=int(sum(b.size for b in store.buffers.values())),
    )


def sample(model: FlowModel, n: int, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    return model.sample(n, temperature, seed)


def check_round_trip(model: FlowModel, x: np.ndarray) -> float:
    """Max |inverse(forward(x)) - x| over the batch."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return 0.0
    out = model.forward(x)
    recovered = model.inverse(out.z, out.factored)
    return float(np.abs(recovered - x).max())


# ── Checkpoints ──────────────────────────────────────────────────────────────
def save_checkpoint(model: FlowModel, directory: str | Path) -> Path:
    directory = Path(directory)
    logger.info("🔄 writing checkpoint to %s", directory)
    entries = []
    for name, arr in model.store.arrays.items():
        file = f"tensors/{name}.nftn"
        write_tensor(directory / file, arr)
        entries.append(TensorEntry(name=name, file=file, shape=list(arr.shape), category=model.store.categories[name]))
    for name, arr in model.store.buffers.items():
        file = f"tensors/{name}.nftn"
        write_tensor(directory / file, arr)
        entries.append(TensorEntry(name=name, file=file, shape=list(arr.shape)))
    manifest = CheckpointManifest(
        config=model.config,
        cached=model.cached,
        actnorm_initialized=model.actnorm_initialized,
        tensors=entries,
    )
    write_bytes(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2).encode("utf-8"))
    logger.info("✅ checkpoint written | tensors=%d", len(entries))
    return directory


def load_checkpoint(directory: str | Path) -> FlowModel:
    directory = Path(directory)
    try:
        manifest = CheckpointManifest.model_validate_json((directory / MANIFEST_NAME).read_bytes())
    except ValidationError as exc:
        logger.error("❌ bad checkpoint manifest in %s\n%s", directory, traceback.format_exc())
        raise DataFormatError(f"invalid checkpoint manifest: {exc}") from exc

    model = build_model(manifest.config)
    if manifest.cached:
        model = model.cache_additive_biases()

    arrays, buffers = {}, {}
    for entry in manifest.tensors:
        value = read_tensor(directory / entry.file)
        if list(value.shape) != entry.shape:
            raise DataFormatError(f"tensor {entry.name} has shape {value.shape}, manifest says {entry.shape}")
        (arrays if entry.category is not None else buffers)[entry.name] = value

    model = model.with_arrays(arrays)
    if set(buffers) != set(model.store.buffers):
        raise DataFormatError("checkpoint buffers do not match the cached model")
    model.store.buffers.update(buffers)
    model.actnorm_initialized = manifest.actnorm_initialized
    return model
