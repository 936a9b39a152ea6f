"""
tensor_core.py
Dense float64 tensors with tape-based reverse-mode differentiation.

A Tensor is an immutable value. When a GradTape is active (``with GradTape() as tape``)
every primitive whose operands include a grad-enabled tensor is recorded on it, and
``tape.backward(loss)`` replays the adjoints in reverse order. The active tape lives in
a context variable, so concurrent training sessions on different threads never share one.

Binary ops accept equal shapes, a scalar operand, or a per-channel vector of length C
against a tensor whose axis 1 has size C.
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from app.errors import (
    ContractError,
    DimensionError,
    InvertibilityError,
    NonFiniteError,
    NumericDomainError,
    OracleError,
)

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

PADDING_MODES = ("zero-same", "causal")

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "nanoflow_active_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad_enabled")

    def __init__(self, data, grad_enabled: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds non-finite values")
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.grad_enabled = grad_enabled

    @classmethod
    def _adopt(cls, arr: np.ndarray, grad_enabled: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.grad_enabled = grad_enabled
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", grad_enabled=True" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return binary("add", self, other)

    def __radd__(self, other):
        return binary("add", other, self)

    def __sub__(self, other):
        return binary("sub", self, other)

    def __rsub__(self, other):
        return binary("sub", other, self)

    def __mul__(self, other):
        return binary("mul", self, other)

    def __rmul__(self, other):
        return binary("mul", other, self)

    def __truediv__(self, other):
        return binary("div", self, other)

    def __rtruediv__(self, other):
        return binary("div", other, self)

    def __neg__(self):
        return unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._adopt(np.zeros(tuple(shape)), False)


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._adopt(np.ones(tuple(shape)), False)


# ── Tape ─────────────────────────────────────────────────────────────────────
@dataclass
class _TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Vjp


class GradTape:
    """Ordered record of executed primitives; consumed by ``backward``."""

    def __init__(self) -> None:
        self._entries: list[_TapeEntry] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, entry: _TapeEntry) -> None:
        self._entries.append(entry)

    def clear(self) -> None:
        self._entries.clear()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.grad_enabled:
            raise ContractError("loss is not reachable from any grad-enabled leaf")

        produced = {id(e.output) for e in self._entries}
        if id(loss) not in produced:
            self.clear()
            return {loss: np.ones(loss.shape)}

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self._entries):
            for t in entry.inputs:
                if t.grad_enabled and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            g_out = adjoints.pop(id(entry.output), None)
            if g_out is None:
                continue
            for t, g in zip(entry.inputs, entry.vjp(g_out)):
                if g is None or not t.grad_enabled:
                    continue
                prev = adjoints.get(id(t))
                adjoints[id(t)] = g if prev is None else prev + g

        grads = {t: adjoints.get(key, np.zeros(t.shape)) for key, t in leaves.items()}
        self.clear()
        return grads


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, np.ndarray]:
    tape = tape or _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward called with no active GradTape")
    return tape.backward(loss)


def apply_primitive(op: str, data: np.ndarray, inputs: Iterable[Tensor], vjp: Vjp) -> Tensor:
    """Wrap a computed array as an op result and record it when any input needs gradients."""
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    inputs = tuple(inputs)
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.grad_enabled for t in inputs)
    out = Tensor._adopt(data, tracked)
    if tracked:
        tape.record(_TapeEntry(op, out, inputs, vjp))
    return out


# ── Broadcasting ─────────────────────────────────────────────────────────────
def _aligned(t: Tensor, other: Tensor, op: str) -> np.ndarray:
    """View of t.data shaped to broadcast against other (scalar or per-channel vector)."""
    if t.shape == other.shape:
        return t.data
    if t.ndim == 0 or t.shape == (1,):
        return t.data.reshape(())
    if t.ndim == 1 and other.ndim >= 2 and other.shape[1] == t.shape[0]:
        return t.data.reshape((1, t.shape[0]) + (1,) * (other.ndim - 2))
    if other.ndim == 0 or other.shape == (1,):
        return t.data
    if other.ndim == 1 and t.ndim >= 2 and t.shape[1] == other.shape[0]:
        return t.data
    raise DimensionError(f"{op}: cannot broadcast {t.shape} against {other.shape}")


def _unbroadcast(g: np.ndarray, aligned: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if aligned.ndim == 0:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, n in enumerate(aligned.shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ── Elementwise ops ──────────────────────────────────────────────────────────
def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def unary(op: str, x: Tensor) -> Tensor:
    x = as_tensor(x)
    a = x.data
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if op == "exp":
            y = np.exp(a)
            return apply_primitive(op, y, (x,), lambda g: (g * y,))
        if op == "log":
            if (a <= 0).any():
                raise NumericDomainError("log of a non-positive value")
            return apply_primitive(op, np.log(a), (x,), lambda g: (g / a,))
        if op == "tanh":
            y = np.tanh(a)
            return apply_primitive(op, y, (x,), lambda g: (g * (1.0 - y * y),))
        if op == "sigmoid":
            y = _sigmoid(a)
            return apply_primitive(op, y, (x,), lambda g: (g * y * (1.0 - y),))
        if op == "neg":
            return apply_primitive(op, -a, (x,), lambda g: (-g,))
        if op == "relu":
            mask = (a > 0).astype(np.float64)
            return apply_primitive(op, a * mask, (x,), lambda g: (g * mask,))
        if op == "abs":
            return apply_primitive(op, np.abs(a), (x,), lambda g: (g * np.sign(a),))
        if op == "softplus":
            return apply_primitive(op, np.logaddexp(0.0, a), (x,), lambda g: (g * _sigmoid(a),))
        if op == "sqrt":
            if (a < 0).any():
                raise NumericDomainError("sqrt of a negative value")
            y = np.sqrt(a)
            return apply_primitive(op, y, (x,), lambda g: (g / (2.0 * y),))
    raise ContractError(f"unknown unary op {op!r}")


def binary(op: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = _aligned(a, b, op), _aligned(b, a, op)
    sa, sb = a.shape, b.shape

    if op == "add":
        return apply_primitive(
            op, av + bv, (a, b), lambda g: (_unbroadcast(g, av, sa), _unbroadcast(g, bv, sb))
        )
    if op == "sub":
        return apply_primitive(
            op, av - bv, (a, b), lambda g: (_unbroadcast(g, av, sa), _unbroadcast(-g, bv, sb))
        )
    if op == "mul":
        return apply_primitive(
            op,
            av * bv,
            (a, b),
            lambda g: (_unbroadcast(g * bv, av, sa), _unbroadcast(g * av, bv, sb)),
        )
    if op == "div":
        if (bv == 0).any():
            raise NumericDomainError("division by zero")
        return apply_primitive(
            op,
            av / bv,
            (a, b),
            lambda g: (_unbroadcast(g / bv, av, sa), _unbroadcast(-g * av / (bv * bv), bv, sb)),
        )
    raise ContractError(f"unknown binary op {op!r}")


def exp(x: Tensor) -> Tensor:
    return unary("exp", x)


def log(x: Tensor) -> Tensor:
    return unary("log", x)


def tanh(x: Tensor) -> Tensor:
    return unary("tanh", x)


def sigmoid(x: Tensor) -> Tensor:
    return unary("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return unary("relu", x)


def softplus(x: Tensor) -> Tensor:
    return unary("softplus", x)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    a = x.data
    inside = ((a >= low) & (a <= high)).astype(np.float64)
    return apply_primitive("clip", np.clip(a, low, high), (x,), lambda g: (g * inside,))


# ── Linear algebra ───────────────────────────────────────────────────────────
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    return apply_primitive("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def logabsdet(w: Tensor) -> Tensor:
    """log |det W| for a square matrix, via LU (``slogdet``)."""
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"logabsdet expects a square matrix, got {w.shape}")
    sign, value = np.linalg.slogdet(w.data)
    if sign == 0 or value < np.log(1e-12):
        raise InvertibilityError("matrix is singular (|det W| <= 1e-12)")
    inv_t = np.linalg.inv(w.data).T
    return apply_primitive("logabsdet", np.asarray(value), (w,), lambda g: (g * inv_t,))


def conv(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding_mode: str = "zero-same",
) -> Tensor:
    """Cross-correlation over batched input ``N×C_in×L`` or ``N×C_in×H×W``.

    ``causal`` pads (k-1)·dilation zeros on the past side of the first spatial axis
    only; remaining axes use zero-same padding.
    """
    nd = kernel.ndim - 2
    if nd not in (1, 2) or x.ndim != nd + 2:
        raise DimensionError(f"conv: input {x.shape} does not match kernel {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv: channel mismatch, input has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )
    if padding_mode not in PADDING_MODES:
        raise ContractError(f"unknown padding mode {padding_mode!r}")
    ksize = kernel.shape[2:]
    if any(k % 2 == 0 for k in ksize):
        raise ContractError(f"kernel spatial size must be odd, got {ksize}")
    if stride < 1 or dilation < 1:
        raise ContractError("stride and dilation must be positive")

    pads = []
    for axis, k in enumerate(ksize):
        total = (k - 1) * dilation
        if padding_mode == "causal" and axis == 0:
            pads.append((total, 0))
        else:
            pads.append((total // 2, total - total // 2))

    xp = np.pad(x.data, [(0, 0), (0, 0), *pads])
    out_sizes = [(n - 1) // stride + 1 for n in x.shape[2:]]
    offsets = list(np.ndindex(*ksize))
    w = kernel.data

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o * dilation, o * dilation + (n - 1) * stride + 1, stride)
            for o, n in zip(off, out_sizes)
        )

    def tap(off):
        return (slice(None), slice(None)) + tuple(off)

    out = np.zeros((x.shape[0], w.shape[0], *out_sizes))
    for off in offsets:
        out += np.einsum("oc,nc...->no...", w[tap(off)], xp[window(off)])

    def vjp(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        n, o = g.shape[:2]
        g_flat = g.reshape(n, o, -1)
        for off in offsets:
            gx[window(off)] += np.einsum("oc,no...->nc...", w[tap(off)], g)
            patch = xp[window(off)].reshape(n, w.shape[1], -1)
            gw[tap(off)] = np.einsum("nop,ncp->oc", g_flat, patch)
        crop = (slice(None), slice(None)) + tuple(
            slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[2:])
        )
        return gx[crop], gw

    return apply_primitive("conv", out, (x, kernel), vjp)


# ── Structural ops ───────────────────────────────────────────────────────────
def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    ndim = parts[0].ndim
    axis = _axis(axis, ndim)
    for p in parts:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {[q.shape for q in parts]} disagree off axis {axis}"
            )
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return apply_primitive(
        "concat",
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: np.split(g, bounds, axis=axis),
    )


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> list[Tensor]:
    axis = _axis(axis, x.ndim)
    if sum(sizes) != x.shape[axis] or any(s <= 0 for s in sizes):
        raise DimensionError(f"split sizes {list(sizes)} do not partition axis of length {x.shape[axis]}")
    out = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def vjp(g, index=index):
            full = np.zeros(x.shape)
            full[index] = g
            return (full,)

        out.append(apply_primitive("split", np.array(x.data[index]), (x,), vjp))
        start += size
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc
    return apply_primitive("reshape", y.copy(), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_primitive(
        "transpose",
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
    )


def tensor_sum(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (_axis(axis, x.ndim),)
    else:
        axes = tuple(_axis(a, x.ndim) for a in axis)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_primitive("sum", np.asarray(y), (x,), vjp)


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over every axis except the leading batch axis."""
    return tensor_sum(x, axis=tuple(range(1, x.ndim)))


def mean(x: Tensor) -> Tensor:
    return tensor_sum(x) / float(x.size)


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Stack n copies of x along a new leading axis."""
    y = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return apply_primitive("broadcast_batch", y, (x,), lambda g: (g.sum(axis=0),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return apply_primitive(
        "softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return apply_primitive("cumsum", np.cumsum(x.data, axis=axis), (x,), vjp)


def gather(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick one entry per position along ``axis``: out[..] = x[.., index[..]]."""
    axis = _axis(axis, x.ndim)
    idx = np.expand_dims(np.asarray(index, dtype=np.int64), axis)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return apply_primitive("gather", y, (x,), vjp)


# ── Gradient oracle ──────────────────────────────────────────────────────────
def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences of f at x."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    base = np.array(x.data)
    first, second = f(Tensor(base)), f(Tensor(base))
    if not np.array_equal(first.data, second.data):
        raise OracleError("function under test is not deterministic")

    leaf = Tensor(base, grad_enabled=True)
    with GradTape() as tape:
        y = f(leaf)
        if y.size != 1:
            raise ContractError(f"oracle function must return a scalar, got {y.shape}")
        analytic = tape.backward(y).get(leaf, np.zeros(base.shape)) if y.grad_enabled else np.zeros(base.shape)

    numeric = np.zeros(base.shape)
    for idx in np.ndindex(*base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * step)

    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    worst = float(err.max()) if err.size else 0.0
    logger.debug("finite-difference check | coords=%d | max_rel_err=%.3e", base.size, worst)
    return worst
