"""
estimator.py
Density estimators that turn a coupling context into CouplingParams.

One Estimator serves every flow of a scale. Which weights a flow k actually uses
depends on the scheme:

    baseline   every layer and the output layer owned by flow k
    naive      one network for all k (the output layer included)
    decomp     shared trunk, per-flow projection head
    nanoflow   shared trunk conditioned on e^k, per-flow projection head

Partial sharing keeps trunk layers 1..s shared and layers s+1..L per flow.
Every parameter is drawn from its own named random stream, so two schemes built
with the same seed hold identical values for identically named weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from app.errors import ConfigurationError, ContractError, DimensionError
from app.schemas.config import ModelConfig
from app.services.coupling import CouplingParams
from app.services.parameters import ParameterStore
from app.services.rng import make_rng
from app.services.tensor_core import (
    Tensor,
    broadcast_batch,
    concat,
    conv,
    exp,
    matmul,
    relu,
    reshape,
    sigmoid,
    split,
    tanh,
)

logger = logging.getLogger(__name__)

EMBEDDING_STD = 0.01
GATE_SATURATION = 30.0
SHARED = "shared"


# ── Injection primitives ─────────────────────────────────────────────────────
def inject_concat(x: Tensor, e_k: Tensor) -> Tensor:
    """Append e^k to x along channels.

    Grids (N, C, rows, cols) gain D/(rows·cols) channels holding e^k row-major;
    flat (N, d) inputs gain D columns.
    """
    n = x.shape[0]
    d = e_k.shape[0]
    if x.ndim == 2:
        return concat([x, broadcast_batch(e_k, n)], axis=1)
    rows, cols = x.shape[2], x.shape[3]
    if d % (rows * cols):
        raise ConfigurationError(f"embedding of size {d} cannot tile a {rows}x{cols} grid")
    e_map = reshape(e_k, (d // (rows * cols), rows, cols))
    return concat([x, broadcast_batch(e_map, n)], axis=1)


def project_embedding(e_k: Tensor, w_l: Tensor) -> Tensor:
    """W^l e^k as a length-H vector."""
    if w_l.ndim != 2 or w_l.shape[1] != e_k.shape[0]:
        raise DimensionError(f"projection {w_l.shape} does not accept an embedding of size {e_k.shape[0]}")
    return reshape(matmul(w_l, reshape(e_k, (e_k.shape[0], 1))), (w_l.shape[0],))


def inject_additive(h: Tensor, e_k: Tensor, w_l: Tensor) -> Tensor:
    """h + W^l e^k, one bias per channel broadcast over positions."""
    return h + project_embedding(e_k, w_l)


def inject_gate(h: Tensor, delta: Tensor) -> Tensor:
    """exp(delta) * h per channel; the identity at delta = 0."""
    return exp(delta) * h


# ── Estimator ────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Estimator:
    prefix: str
    scheme: str
    trunk: str                 # "wavenet" (causal rows) or "convnet"
    channels: int
    rows: int
    cols: int
    hidden: int
    depth: int
    flows: int
    coupling: str
    bins: int
    head_kernel: int
    shared_layers: int
    embedding_dim: int | None
    injection: frozenset[str]
    per_flow_projection: bool
    seed: int

    @classmethod
    def from_config(cls, config: ModelConfig, scale: int, grid: tuple[int, int, int]) -> "Estimator":
        channels, rows, cols = grid
        return cls(
            prefix=f"s{scale}",
            scheme=config.scheme,
            trunk="convnet" if config.layout == "image" else "wavenet",
            channels=channels,
            rows=rows,
            cols=cols,
            hidden=config.hidden,
            depth=config.depth,
            flows=config.flows,
            coupling=config.coupling,
            bins=config.bins,
            head_kernel=config.head_kernel,
            shared_layers=config.effective_shared_layers,
            embedding_dim=config.embedding_dim,
            injection=config.injection_modes,
            per_flow_projection=config.per_flow_projection,
            seed=config.seed,
        )

    # ── Ownership ────────────────────────────────────────────────────────────
    @property
    def padding(self) -> str:
        return "causal" if self.trunk == "wavenet" else "zero-same"

    @property
    def arity(self) -> int:
        return CouplingParams.arity(self.coupling, self.bins)

    @property
    def head_shared(self) -> bool:
        return self.scheme == "naive" and self.shared_layers == self.depth

    @property
    def head_category(self) -> str:
        # baseline and naive count their output layer as part of the network
        return "head" if self.scheme in ("decomp", "nanoflow") else "trunk"

    @property
    def concat_channels(self) -> int:
        if "concat" not in self.injection:
            return 0
        return self.embedding_dim // (self.rows * self.cols)

    def owner(self, layer: int, k: int) -> str:
        return SHARED if layer <= self.shared_layers else f"f{k}"

    def head_owner(self, k: int) -> str:
        return SHARED if self.head_shared else f"f{k}"

    def owners(self, layer: int) -> list[str]:
        if layer <= self.shared_layers:
            return [SHARED]
        return [f"f{k}" for k in range(1, self.flows + 1)]

    # ── Names ────────────────────────────────────────────────────────────────
    def layer_name(self, owner: str, layer: int, part: str) -> str:
        return f"{self.prefix}.trunk.{owner}.l{layer}.{part}"

    def head_name(self, owner: str, part: str) -> str:
        return f"{self.prefix}.head.{owner}.{part}"

    def embed_name(self, k: int) -> str:
        return f"{self.prefix}.embed.f{k}"

    def additive_name(self, k: int, layer: int) -> str:
        if self.per_flow_projection:
            return f"{self.prefix}.inject.additive.f{k}.l{layer}"
        return f"{self.prefix}.inject.additive.l{layer}"

    def gate_name(self, k: int, layer: int) -> str:
        return f"{self.prefix}.inject.gate.f{k}.l{layer}"

    def concat_name(self, owner: str) -> str:
        return f"{self.prefix}.inject.{owner}.concat"

    def cache_name(self, k: int, layer: int) -> str:
        return f"{self.prefix}.cache.additive.f{k}.l{layer}"

    # ── Allocation ───────────────────────────────────────────────────────────
    def _draw(self, name: str, shape: tuple[int, ...], std: float) -> np.ndarray:
        return make_rng(self.seed, name).normal(0.0, std, size=shape)

    def _conv_weight(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        fan_in = int(np.prod(shape[1:]))
        return self._draw(name, shape, 1.0 / np.sqrt(fan_in))

    def layer_shapes(self, layer: int) -> dict[str, tuple[int, ...]]:
        h = self.hidden
        if layer == 1:
            return {"weight": (h, self.channels, 3, 3), "bias": (h,)}
        if self.trunk == "wavenet":
            return {
                "dil_weight": (2 * h, h, 3, 3),
                "dil_bias": (2 * h,),
                "res_weight": (h, h, 1, 1),
                "res_bias": (h,),
            }
        return {"weight": (h, h, 1, 1), "bias": (h,)}

    def register(self, store: ParameterStore) -> None:
        """Allocate every parameter this estimator owns."""
        for layer in range(1, self.depth + 1):
            for owner in self.owners(layer):
                for part, shape in self.layer_shapes(layer).items():
                    name = self.layer_name(owner, layer, part)
                    value = np.zeros(shape) if part.endswith("bias") else self._conv_weight(name, shape)
                    store.add(name, value, "trunk")

        head_owners = [SHARED] if self.head_shared else [f"f{k}" for k in range(1, self.flows + 1)]
        out = self.channels * self.arity
        hk = self.head_kernel
        for owner in head_owners:
            # zero init: every flow starts as the identity coupling
            store.add(self.head_name(owner, "weight"), np.zeros((out, self.hidden, hk, hk)), self.head_category)
            store.add(self.head_name(owner, "bias"), np.zeros((out,)), self.head_category)

        if self.scheme != "nanoflow":
            return
        d, h = self.embedding_dim, self.hidden
        for k in range(1, self.flows + 1):
            store.add(self.embed_name(k), self._draw(self.embed_name(k), (d,), EMBEDDING_STD), "embedding")
        if "additive" in self.injection:
            names = {self.additive_name(k, l) for k in range(1, self.flows + 1) for l in range(1, self.depth + 1)}
            for name in sorted(names):
                store.add(name, self._draw(name, (h, d), 1.0 / np.sqrt(d)), "injection")
        if "gate" in self.injection:
            for k in range(1, self.flows + 1):
                for l in range(1, self.depth + 1):
                    store.add(self.gate_name(k, l), np.zeros((h,)), "injection")
        if "concat" in self.injection:
            shape = (h, self.concat_channels, 3, 3)
            for owner in self.owners(1):
                name = self.concat_name(owner)
                store.add(name, self._conv_weight(name, shape), "injection")

    # ── Evaluation ───────────────────────────────────────────────────────────
    def _inject(self, h: Tensor, e: Tensor | None, k: int, layer: int, leaves) -> Tensor:
        if e is None:
            return h
        if "additive" in self.injection:
            cached = leaves.get(self.cache_name(k, layer))
            if cached is not None:
                h = h + cached
            else:
                h = inject_additive(h, e, leaves[self.additive_name(k, layer)])
        if "gate" in self.injection:
            h = inject_gate(h, leaves[self.gate_name(k, layer)])
        return h

    def _first_layer(self, context: Tensor, e: Tensor | None, k: int, leaves) -> Tensor:
        owner = self.owner(1, k)
        h = conv(context, leaves[self.layer_name(owner, 1, "weight")], padding_mode=self.padding)
        h = h + leaves[self.layer_name(owner, 1, "bias")]
        if e is not None and "concat" in self.injection:
            # conv over [context; e-map] evaluated as the sum of its two channel blocks
            e_only = inject_concat(context, e)
            _, e_map = split(e_only, 1, [self.channels, self.concat_channels])
            h = h + conv(e_map, leaves[self.concat_name(owner)], padding_mode=self.padding)
        return h

    def _residual_layer(self, h: Tensor, k: int, layer: int, leaves) -> Tensor:
        owner = self.owner(layer, k)

        def name(part: str) -> str:
            return self.layer_name(owner, layer, part)

        if self.trunk == "wavenet":
            a = conv(h, leaves[name("dil_weight")], dilation=2 ** ((layer - 2) % 4), padding_mode="causal")
            a = a + leaves[name("dil_bias")]
            filt, gate = split(a, 1, [self.hidden, self.hidden])
            u = tanh(filt) * sigmoid(gate)
            return h + conv(u, leaves[name("res_weight")]) + leaves[name("res_bias")]
        return conv(h, leaves[name("weight")]) + leaves[name("bias")]

    def estimate(self, context: Tensor, k: int, leaves) -> CouplingParams:
        """CouplingParams for flow k from a context grid (N, C, rows, cols)."""
        if not 1 <= k <= self.flows:
            raise ContractError(f"flow index {k} outside 1..{self.flows}")
        if context.ndim != 4 or context.shape[1:] != (self.channels, self.rows, self.cols):
            raise DimensionError(
                f"{self.prefix} estimator expects (N, {self.channels}, {self.rows}, {self.cols}), got {context.shape}"
            )
        e = leaves[self.embed_name(k)] if self.scheme == "nanoflow" else None

        h = self._first_layer(context, e, k, leaves)
        h = self._inject(h, e, k, 1, leaves)
        if self.trunk == "convnet":
            h = relu(h)
        for layer in range(2, self.depth + 1):
            h = self._residual_layer(h, k, layer, leaves)
            h = self._inject(h, e, k, layer, leaves)
            if self.trunk == "convnet":
                h = relu(h)

        owner = self.head_owner(k)
        raw = conv(h, leaves[self.head_name(owner, "weight")], padding_mode=self.padding)
        raw = raw + leaves[self.head_name(owner, "bias")]
        return CouplingParams.from_raw(raw, self.coupling, self.channels, self.bins)

    # ── Bias caching ─────────────────────────────────────────────────────────
    def cache_additive_biases(self, store: ParameterStore) -> int:
        """Fold W^l e^k into per-(k, l) bias buffers and drop W^l; returns weights removed."""
        if self.scheme != "nanoflow" or "additive" not in self.injection:
            return 0
        leaves = store.leaves()
        for k in range(1, self.flows + 1):
            for l in range(1, self.depth + 1):
                name = self.additive_name(k, l)
                if name not in store.arrays:
                    continue  # already cached
                bias = project_embedding(leaves[self.embed_name(k)], leaves[name])
                store.add_buffer(self.cache_name(k, l), bias.numpy())
        removed = 0
        for name in sorted({self.additive_name(k, l) for k in range(1, self.flows + 1) for l in range(1, self.depth + 1)}):
            if name in store.arrays:
                removed += store.arrays[name].size
                store.remove(name)
        logger.info("   %s: cached %d additive biases, dropped %d projection weights",
                    self.prefix, self.flows * self.depth, removed)
        return removed

    def saturated_gates(self, store: ParameterStore) -> list[str]:
        if "gate" not in self.injection:
            return []
        return [
            self.gate_name(k, l)
            for k in range(1, self.flows + 1)
            for l in range(1, self.depth + 1)
            if np.abs(store.arrays[self.gate_name(k, l)]).max() > GATE_SATURATION
        ]
