"""
coupling.py
Invertible flow steps: grouped affine and rational-quadratic spline couplings,
actnorm, group permutations and the multi-scale squeeze / factor-out pair.

Every step works on a 4-D grid ``(N, C, rows, cols)``. Flat and sequence layouts
partition the row axis (one group per row); image layouts partition channels.
Forward passes are built from tensor_core ops so gradients flow to parameters;
inverses are evaluated directly on arrays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

from app.errors import ContractError, DimensionError, NumericError, NumericStabilityError
from app.services.tensor_core import (
    Tensor,
    broadcast_batch,
    clip,
    concat,
    conv,
    cumsum,
    exp,
    gather,
    log,
    logabsdet,
    ones,
    reshape,
    softmax,
    softplus,
    split,
    sum_per_sample,
    tensor_sum,
    transpose,
    unary,
    zeros,
)

logger = logging.getLogger(__name__)

LOG_SIGMA_LIMIT = 30.0
MIN_BIN_SIZE = 1e-3
MIN_DERIVATIVE = 1e-3
DEFAULT_BINS = 8
DEFAULT_TAIL_BOUND = 3.0
ACTNORM_VARIANCE_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)

# softplus(raw + shift) + MIN_DERIVATIVE == 1 at raw == 0
_DERIVATIVE_SHIFT = math.log(math.expm1(1.0 - MIN_DERIVATIVE))

ContextMode = Literal["shifted", "masked"]
Stats = dict[int, dict[str, float]]


# ── Partition ────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class GroupPartition:
    """G contiguous equal-size groups along one axis of a 4-D grid."""

    groups: int
    axis: int
    length: int

    def __post_init__(self) -> None:
        if self.groups < 2:
            raise ContractError(f"a partition needs at least 2 groups, got {self.groups}")
        if self.axis not in (1, 2):
            raise ContractError("partitions run along channels (axis 1) or rows (axis 2)")
        if self.length % self.groups:
            raise DimensionError(f"G={self.groups} does not divide axis length {self.length}")

    @property
    def size(self) -> int:
        return self.length // self.groups

    def _check(self, x: Tensor) -> None:
        if x.shape[self.axis] != self.length:
            raise DimensionError(
                f"partition expects length {self.length} on axis {self.axis}, got shape {x.shape}"
            )

    def split(self, x: Tensor) -> list[Tensor]:
        self._check(x)
        return split(x, self.axis, [self.size] * self.groups)

    def join(self, parts: Sequence[Tensor]) -> Tensor:
        return concat(parts, axis=self.axis)

    def take(self, x: Tensor, i: int) -> Tensor:
        """Group i (1-based) of x; x may carry trailing axes beyond the grid."""
        if not 1 <= i <= self.groups:
            raise ContractError(f"group index {i} outside 1..{self.groups}")
        return split(x, self.axis, [self.size] * self.groups)[i - 1]

    def shift(self, x: Tensor) -> Tensor:
        """Context for every group at once: group i sees X_{i-1}, group 1 sees zeros."""
        self._check(x)
        head, _ = split(x, self.axis, [self.length - self.size, self.size])
        pad_shape = list(x.shape)
        pad_shape[self.axis] = self.size
        return concat([zeros(pad_shape), head], axis=self.axis)

    def mask_from(self, x: Tensor, i: int) -> Tensor:
        """x with groups i..G zeroed (the context X_<i in place)."""
        parts = self.split(x)
        return self.join(parts[: i - 1] + [zeros(p.shape) for p in parts[i - 1 :]])

    def split_array(self, a: np.ndarray) -> list[np.ndarray]:
        return list(np.split(a, self.groups, axis=self.axis))

    def join_array(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts, axis=self.axis)


# ── Coupling parameters ──────────────────────────────────────────────────────
@dataclass(frozen=True)
class CouplingParams:
    """Affine (mu, log_sigma) or spline (widths, heights, derivatives) parameters.

    All tensors share the grid shape; spline tensors carry a trailing bin axis.
    Spline values are raw (unnormalized) estimator outputs.
    """

    mu: Tensor | None = None
    log_sigma: Tensor | None = None
    widths: Tensor | None = None
    heights: Tensor | None = None
    derivatives: Tensor | None = None

    @property
    def kind(self) -> str:
        return "affine" if self.mu is not None else "rq_spline"

    @staticmethod
    def arity(kind: str, bins: int = DEFAULT_BINS) -> int:
        if kind == "affine":
            return 2
        if kind == "rq_spline":
            return 3 * bins - 1
        raise ContractError(f"unknown coupling kind {kind!r}")

    @classmethod
    def from_raw(cls, raw: Tensor, kind: str, channels: int, bins: int = DEFAULT_BINS) -> "CouplingParams":
        """Slice an estimator output of shape (N, C·arity, rows, cols)."""
        expected = channels * cls.arity(kind, bins)
        if raw.ndim != 4 or raw.shape[1] != expected:
            raise DimensionError(f"{kind} coupling needs {expected} output channels, got {raw.shape}")
        if kind == "affine":
            mu, log_sigma = split(raw, 1, [channels, channels])
            return cls(mu=mu, log_sigma=log_sigma)
        n, _, rows, cols = raw.shape
        per_elem = transpose(reshape(raw, (n, channels, 3 * bins - 1, rows, cols)), (0, 1, 3, 4, 2))
        widths, heights, derivatives = split(per_elem, -1, [bins, bins, bins - 1])
        return cls(widths=widths, heights=heights, derivatives=derivatives)

    def select(self, partition: GroupPartition, i: int) -> "CouplingParams":
        picked = {
            name: partition.take(value, i)
            for name, value in self.__dict__.items()
            if value is not None
        }
        return CouplingParams(**picked)


EstimatorFn = Callable[[Tensor], CouplingParams]


def _record_saturation(raw_log_sigma: np.ndarray, stats: dict[str, float] | None) -> None:
    if stats is None:
        return
    peak = float(np.abs(raw_log_sigma).max()) if raw_log_sigma.size else 0.0
    stats["max_abs_log_sigma"] = max(stats.get("max_abs_log_sigma", 0.0), peak)
    stats["saturated"] = stats.get("saturated", 0) + int((np.abs(raw_log_sigma) > LOG_SIGMA_LIMIT).sum())


# ── Elementwise transforms ───────────────────────────────────────────────────
def _affine_apply(x: Tensor, params: CouplingParams, stats: dict | None) -> tuple[Tensor, Tensor]:
    _record_saturation(params.log_sigma.data, stats)
    log_sigma = clip(params.log_sigma, -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT)
    z = exp(log_sigma) * x + params.mu
    return z, sum_per_sample(log_sigma)


def _affine_invert(z: np.ndarray, params: CouplingParams) -> np.ndarray:
    raw = params.log_sigma.data
    if (np.abs(raw) > LOG_SIGMA_LIMIT).any():
        raise NumericStabilityError(
            f"|log sigma| exceeds {LOG_SIGMA_LIMIT:g} (max {np.abs(raw).max():.3g}); sigma cannot be inverted"
        )
    return (z - params.mu.data) * np.exp(-raw)


def _spline_knots(params: CouplingParams, tail_bound: float) -> tuple[Tensor, Tensor, Tensor]:
    """Knot x/y positions (…, B+1) and knot derivatives (…, B+1), boundary derivatives 1."""

    def knots(raw: Tensor) -> Tensor:
        bins = raw.shape[-1]
        if MIN_BIN_SIZE * bins >= 1.0:
            raise ContractError(f"{bins} bins cannot each hold the minimum size {MIN_BIN_SIZE}")
        p = MIN_BIN_SIZE + (1.0 - MIN_BIN_SIZE * bins) * softmax(raw, axis=-1)
        interior, _ = split(cumsum(p, axis=-1), -1, [bins - 1, 1])
        edge = raw.shape[:-1] + (1,)
        unit = concat([zeros(edge), interior, ones(edge)], axis=-1)
        return unit * (2.0 * tail_bound) - tail_bound

    edge = params.derivatives.shape[:-1] + (1,)
    inner = MIN_DERIVATIVE + softplus(params.derivatives + _DERIVATIVE_SHIFT)
    derivs = concat([ones(edge), inner, ones(edge)], axis=-1)
    return knots(params.widths), knots(params.heights), derivs


def _bin_index(knots: np.ndarray, values: np.ndarray) -> np.ndarray:
    # points on an interior knot fall in the left bin
    return np.sum(values[..., None] > knots[..., 1:-1], axis=-1)


def _diff(knots: Tensor) -> Tensor:
    bins = knots.shape[-1] - 1
    lo, _ = split(knots, -1, [bins, 1])
    _, hi = split(knots, -1, [1, bins])
    return hi - lo


def _spline_apply(x: Tensor, params: CouplingParams, tail_bound: float) -> tuple[Tensor, Tensor]:
    kx, ky, d = _spline_knots(params, tail_bound)
    inside = Tensor(((x.data >= -tail_bound) & (x.data <= tail_bound)).astype(np.float64))
    xc = clip(x, -tail_bound, tail_bound)
    idx = _bin_index(kx.data, xc.data)

    x_k, y_k = gather(kx, idx), gather(ky, idx)
    w_k, h_k = gather(_diff(kx), idx), gather(_diff(ky), idx)
    d_k, d_k1 = gather(d, idx), gather(d, idx + 1)

    s = h_k / w_k
    xi = (xc - x_k) / w_k
    t = xi * (1.0 - xi)
    numerator = h_k * (s * xi * xi + d_k * t)
    denominator = s + (d_k1 + d_k - 2.0 * s) * t
    y = y_k + numerator / denominator
    slope = s * s * (d_k1 * xi * xi + 2.0 * s * t + d_k * (1.0 - xi) * (1.0 - xi))
    log_slope = log(slope) - 2.0 * log(denominator)

    z = inside * y + (1.0 - inside) * x
    return z, sum_per_sample(inside * log_slope)


def _spline_invert(z: np.ndarray, params: CouplingParams, tail_bound: float) -> np.ndarray:
    kx, ky, d = (t.data for t in _spline_knots(params, tail_bound))
    inside = (z >= -tail_bound) & (z <= tail_bound)
    zc = np.clip(z, -tail_bound, tail_bound)
    idx = _bin_index(ky, zc)

    def take(a: np.ndarray, j: np.ndarray) -> np.ndarray:
        return np.take_along_axis(a, j[..., None], axis=-1)[..., 0]

    x_k, y_k = take(kx, idx), take(ky, idx)
    w_k, h_k = take(np.diff(kx, axis=-1), idx), take(np.diff(ky, axis=-1), idx)
    d_k, d_k1 = take(d, idx), take(d, idx + 1)

    s = h_k / w_k
    dy = zc - y_k
    curvature = d_k1 + d_k - 2.0 * s
    a = h_k * (s - d_k) + dy * curvature
    b = h_k * d_k - dy * curvature
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    root = (2.0 * c) / (-b - np.sqrt(disc))
    return np.where(inside, root * w_k + x_k, z)


# ── Coupling drivers ─────────────────────────────────────────────────────────
def _context(x: Tensor, partition: GroupPartition, mode: ContextMode, i: int) -> Tensor:
    if mode == "shifted":
        return partition.shift(x)
    if mode == "masked":
        return partition.mask_from(x, i)
    raise ContractError(f"unknown context mode {mode!r}")


def _coupling_forward(x, partition, estimator_fn, apply, mode) -> tuple[Tensor, Tensor]:
    if mode == "shifted":
        # one estimator pass yields parameters for every group
        return apply(x, estimator_fn(partition.shift(x)))
    parts = partition.split(x)
    zs, log_det = [], None
    for i in range(1, partition.groups + 1):
        params = estimator_fn(_context(x, partition, mode, i)).select(partition, i)
        z_i, ld_i = apply(parts[i - 1], params)
        zs.append(z_i)
        log_det = ld_i if log_det is None else log_det + ld_i
    return partition.join(zs), log_det


def _coupling_inverse(z, partition, estimator_fn, invert, mode) -> Tensor:
    z_parts = partition.split_array(z.data)
    recovered = [np.zeros_like(p) for p in z_parts]
    for i in range(1, partition.groups + 1):
        current = Tensor(partition.join_array(recovered))
        params = estimator_fn(_context(current, partition, mode, i)).select(partition, i)
        recovered[i - 1] = invert(z_parts[i - 1], params)
    return Tensor(partition.join_array(recovered))


def affine_forward(
    x: Tensor,
    partition: GroupPartition,
    estimator_fn: EstimatorFn,
    context_mode: ContextMode = "shifted",
    stats: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Z_i = sigma_i * X_i + mu_i for every group; returns (z, per-sample log_det)."""
    return _coupling_forward(
        x, partition, estimator_fn, lambda v, p: _affine_apply(v, p, stats), context_mode
    )


def affine_inverse(
    z: Tensor,
    partition: GroupPartition,
    estimator_fn: EstimatorFn,
    context_mode: ContextMode = "shifted",
) -> Tensor:
    return _coupling_inverse(z, partition, estimator_fn, _affine_invert, context_mode)


def rq_spline_forward(
    x: Tensor,
    partition: GroupPartition,
    estimator_fn: EstimatorFn,
    bins: int = DEFAULT_BINS,
    tail_bound: float = DEFAULT_TAIL_BOUND,
    context_mode: ContextMode = "shifted",
) -> tuple[Tensor, Tensor]:
    _check_spline(bins, tail_bound)
    return _coupling_forward(
        x, partition, estimator_fn, lambda v, p: _spline_apply(v, p, tail_bound), context_mode
    )


def rq_spline_inverse(
    z: Tensor,
    partition: GroupPartition,
    estimator_fn: EstimatorFn,
    bins: int = DEFAULT_BINS,
    tail_bound: float = DEFAULT_TAIL_BOUND,
    context_mode: ContextMode = "shifted",
) -> Tensor:
    _check_spline(bins, tail_bound)
    return _coupling_inverse(
        z, partition, estimator_fn, lambda v, p: _spline_invert(v, p, tail_bound), context_mode
    )


def _check_spline(bins: int, tail_bound: float) -> None:
    if bins < 2:
        raise ContractError(f"spline needs at least 2 bins, got {bins}")
    if tail_bound <= 0:
        raise ContractError(f"tail bound must be positive, got {tail_bound}")


# ── Actnorm ──────────────────────────────────────────────────────────────────
def actnorm_forward(x: Tensor, scale: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    spatial = math.prod(x.shape[2:])
    z = (x + bias) * scale
    log_det = tensor_sum(log(unary("abs", scale))) * float(spatial)
    return z, broadcast_batch(log_det, x.shape[0])


def actnorm_inverse(z: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    shape = (1, -1) + (1,) * (z.ndim - 2)
    if (scale.data == 0).any():
        raise NumericStabilityError("actnorm scale has a zero entry")
    return Tensor(z.data / scale.data.reshape(shape) - bias.data.reshape(shape))


def actnorm_data_init(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(scale, bias) giving per-channel zero mean and unit variance on batch x."""
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    return 1.0 / np.sqrt(np.maximum(var, ACTNORM_VARIANCE_FLOOR)), -mean


# ── Permutations ─────────────────────────────────────────────────────────────
def permute_groups(
    x: Tensor,
    partition: GroupPartition,
    strategy: str = "reverse",
    weight: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    if strategy == "reverse":
        return partition.join(partition.split(x)[::-1]), zeros((x.shape[0],))
    if strategy == "inv_conv":
        if weight is None:
            raise ContractError("inv_conv needs a weight matrix")
        channels = x.shape[1]
        if weight.shape != (channels, channels):
            raise DimensionError(f"inv_conv weight {weight.shape} does not match {channels} channels")
        log_det = logabsdet(weight) * float(math.prod(x.shape[2:]))
        z = conv(x, reshape(weight, (channels, channels, 1, 1)))
        return z, broadcast_batch(log_det, x.shape[0])
    raise ContractError(f"unknown permutation strategy {strategy!r}")


def unpermute_groups(
    z: Tensor,
    partition: GroupPartition,
    strategy: str = "reverse",
    weight: Tensor | None = None,
) -> Tensor:
    if strategy == "reverse":
        # reversal is an involution
        return Tensor(partition.join_array(partition.split_array(z.data)[::-1]))
    if strategy == "inv_conv":
        logabsdet(weight)  # raises on a singular matrix
        inverse = np.linalg.inv(weight.data)
        return Tensor(np.einsum("oc,nc...->no...", inverse, z.data))
    raise ContractError(f"unknown permutation strategy {strategy!r}")


# ── Multi-scale reshuffles ───────────────────────────────────────────────────
def squeeze(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 4C, H/2, W/2); channel c·4 + 2·dy + dx holds pixel (2i+dy, 2j+dx)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"squeeze needs even spatial dims, got {h}x{w}")
    y = reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (n, 4 * c, h // 2, w // 2))


def unsqueeze(z: Tensor) -> Tensor:
    n, c4, h, w = z.shape
    if c4 % 4:
        raise DimensionError(f"unsqueeze needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    y = reshape(z, (n, c, 2, 2, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, c, 2 * h, 2 * w))


def standard_normal_logpdf(z: Tensor) -> Tensor:
    """Per-sample log N(z; 0, I) in nats."""
    dims = math.prod(z.shape[1:])
    return sum_per_sample(z * z) * -0.5 - 0.5 * dims * LOG_2PI


def factor_out(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split channels in half: (kept, factored, log-prior of factored)."""
    c = x.shape[1]
    if c % 2:
        raise DimensionError(f"factor_out needs an even channel count, got {c}")
    kept, factored = split(x, 1, [c // 2, c // 2])
    return kept, factored, standard_normal_logpdf(factored)


def refactor(kept: Tensor, factored: Tensor) -> Tensor:
    return concat([kept, factored], axis=1)


# ── Steps ────────────────────────────────────────────────────────────────────
Leaves = Mapping[str, Tensor]
EstimateFn = Callable[[Tensor, int, Leaves], CouplingParams]


@dataclass(frozen=True)
class CouplingStep:
    flow: int                       # global 1-based flow index, used in error messages
    k: int                          # flow index inside its scale, selects e^k / heads
    kind: str
    partition: GroupPartition
    context_mode: ContextMode
    estimate: EstimateFn = field(repr=False, compare=False)
    bins: int = DEFAULT_BINS
    tail_bound: float = DEFAULT_TAIL_BOUND

    def _fn(self, leaves: Leaves) -> EstimatorFn:
        return lambda context: self.estimate(context, self.k, leaves)

    def forward(self, x: Tensor, leaves: Leaves, stats: Stats | None = None) -> tuple[Tensor, Tensor]:
        if self.kind == "affine":
            bucket = None if stats is None else stats.setdefault(self.flow, {})
            return affine_forward(x, self.partition, self._fn(leaves), self.context_mode, bucket)
        return rq_spline_forward(
            x, self.partition, self._fn(leaves), self.bins, self.tail_bound, self.context_mode
        )

    def inverse(self, z: Tensor, leaves: Leaves) -> Tensor:
        if self.kind == "affine":
            return affine_inverse(z, self.partition, self._fn(leaves), self.context_mode)
        return rq_spline_inverse(
            z, self.partition, self._fn(leaves), self.bins, self.tail_bound, self.context_mode
        )


@dataclass(frozen=True)
class ActNormStep:
    flow: int
    prefix: str

    def forward(self, x: Tensor, leaves: Leaves, stats: Stats | None = None) -> tuple[Tensor, Tensor]:
        return actnorm_forward(x, leaves[f"{self.prefix}.scale"], leaves[f"{self.prefix}.bias"])

    def inverse(self, z: Tensor, leaves: Leaves) -> Tensor:
        return actnorm_inverse(z, leaves[f"{self.prefix}.scale"], leaves[f"{self.prefix}.bias"])


@dataclass(frozen=True)
class PermutationStep:
    flow: int
    partition: GroupPartition
    strategy: str
    prefix: str | None = None       # weight owner for inv_conv

    def _weight(self, leaves: Leaves) -> Tensor | None:
        return leaves[f"{self.prefix}.weight"] if self.strategy == "inv_conv" else None

    def forward(self, x: Tensor, leaves: Leaves, stats: Stats | None = None) -> tuple[Tensor, Tensor]:
        return permute_groups(x, self.partition, self.strategy, self._weight(leaves))

    def inverse(self, z: Tensor, leaves: Leaves) -> Tensor:
        return unpermute_groups(z, self.partition, self.strategy, self._weight(leaves))


@dataclass(frozen=True)
class SqueezeStep:
    flow: None = None

    def forward(self, x: Tensor, leaves: Leaves, stats: Stats | None = None) -> tuple[Tensor, Tensor]:
        return squeeze(x), zeros((x.shape[0],))

    def inverse(self, z: Tensor, leaves: Leaves) -> Tensor:
        return unsqueeze(z)


@dataclass(frozen=True)
class FactorOutStep:
    flow: None = None


Step = CouplingStep | ActNormStep | PermutationStep | SqueezeStep | FactorOutStep


@dataclass
class FlowOutput:
    z: Tensor
    factored: list[Tensor]
    log_det: Tensor          # (N,) sum of every step's log-det
    log_prior: Tensor        # (N,) prior log-density of z and every factored part

    @property
    def log_likelihood(self) -> Tensor:
        return self.log_prior + self.log_det


# ── Composition ──────────────────────────────────────────────────────────────
@dataclass
class FlowComposition:
    """Ordered steps f^1..f^K with a standard-normal prior."""

    steps: list[Step] = field(default_factory=list)

    @property
    def flow_count(self) -> int:
        return len({s.flow for s in self.steps if s.flow is not None})

    def forward(self, x: Tensor, leaves: Leaves, stats: Stats | None = None) -> FlowOutput:
        n = x.shape[0]
        log_det = zeros((n,))
        log_prior = zeros((n,))
        factored: list[Tensor] = []
        h = x
        for step in self.steps:
            try:
                if isinstance(step, FactorOutStep):
                    h, part, lp = factor_out(h)
                    factored.append(part)
                    log_prior = log_prior + lp
                    continue
                h, ld = step.forward(h, leaves, stats)
                log_det = log_det + ld
            except NumericError as exc:
                if step.flow is None:
                    raise
                raise exc.with_flow(step.flow) from exc
        log_prior = log_prior + standard_normal_logpdf(h)
        return FlowOutput(z=h, factored=factored, log_det=log_det, log_prior=log_prior)

    def inverse(self, z: Tensor, factored: Sequence[Tensor], leaves: Leaves) -> Tensor:
        pending = list(factored)
        h = z
        for step in reversed(self.steps):
            try:
                if isinstance(step, FactorOutStep):
                    if not pending:
                        raise ContractError("inverse ran out of factored-out latents")
                    h = refactor(h, pending.pop())
                    continue
                h = step.inverse(h, leaves)
            except NumericError as exc:
                if step.flow is None:
                    raise
                raise exc.with_flow(step.flow) from exc
        if pending:
            raise ContractError(f"{len(pending)} factored-out latents left unused")
        return h

    def latent_shapes(self, shape: tuple[int, ...]) -> tuple[tuple[int, ...], list[tuple[int, ...]]]:
        """Shapes of the final latent and of each factored part for input shape (N, C, H, W)."""
        n, c, h, w = shape
        factored = []
        for step in self.steps:
            if isinstance(step, SqueezeStep):
                c, h, w = 4 * c, h // 2, w // 2
            elif isinstance(step, FactorOutStep):
                c //= 2
                factored.append((n, c, h, w))
        return (n, c, h, w), factored


def total_log_likelihood(x: Tensor, model: FlowComposition, leaves: Leaves) -> Tensor:
    """Per-sample log P_X(x) = log P_Z(z) + sum_k log_det_k, in nats."""
    return model.forward(x, leaves).log_likelihood
