"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Usage::

    with Tape() as tape:
        loss = mse_loss(linear(x, w, b), y)
    grads = tape.backward(loss)      # {tensor: ndarray} for every leaf with requires_grad

Operations run eagerly on numpy arrays. When a tape is active and at least
one input requires a gradient, the op appends a node holding its saved
activations and a backward closure. Tapes are thread-local and single use.

dtype follows the inputs: float32 for training, float64 for the shadow
evaluations used by gradient checks.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_local = threading.local()


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tensor_sum(self)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, out: Tensor, parents, backward) -> None:
        self.nodes.append(_Node(out, tuple(parents), backward))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse pass from a scalar ``loss``; returns gradients of every leaf that requires one."""
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        # nodes were appended in execution order, which is already topological
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key not in produced:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.nodes.clear()
        return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _active(*inputs) -> Tape | None:
    stack = _stack()
    if not stack:
        return None
    if any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        return stack[-1]
    return None


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _out(data: np.ndarray, tape: Tape | None) -> Tensor:
    return Tensor(data, requires_grad=tape is not None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    tape = _active(a, b)
    out = _out(a.data + b.data, tape)
    if tape:
        sa, sb = a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return out


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    tape = _active(a, b)
    out = _out(a.data - b.data, tape)
    if tape:
        sa, sb = a.shape, b.shape
        tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    return out


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "data", None))
    b = _wrap(b, a.data)
    tape = _active(a, b)
    out = _out(a.data * b.data, tape)
    if tape:
        ad, bd = a.data, b.data

        def back(g):
            return (
                _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
            )

        tape.record(out, (a, b), back)
    return out


def gelu(x: Tensor, approximate: bool = True) -> Tensor:
    """GELU; tanh approximation by default, exact erf form with ``approximate=False``."""
    xd = x.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (xd + GELU_C * (xd * xd * xd))
        th = np.tanh(inner)
        y = 0.5 * xd * (1.0 + th)
    else:
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        y = xd * cdf
    tape = _active(x)
    out = _out(y.astype(xd.dtype, copy=False), tape)
    if tape:
        if approximate:

            def back(g):
                x2 = xd * xd
                d_inner = x2 * (_SQRT_2_OVER_PI * 3.0 * GELU_C)
                d_inner += _SQRT_2_OVER_PI
                sech2 = 1.0 - th * th
                sech2 *= xd
                sech2 *= d_inner
                sech2 += th
                sech2 += 1.0
                sech2 *= 0.5
                return (g * sech2,)

        else:

            def back(g):
                pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
                return (g * (cdf + xd * pdf),)

        tape.record(out, (x,), back)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))  # overflow-free sigmoid
    tape = _active(x)
    out = _out(xd * sig, tape)
    if tape:
        tape.record(out, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))
    return out


# --- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    tape = _active(x)
    out = _out(x.data.reshape(shape), tape)
    if tape:
        src = x.shape
        tape.record(out, (x,), lambda g: (g.reshape(src),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    tape = _active(x)
    out = _out(x.data.transpose(axes), tape)
    if tape:
        inv = tuple(np.argsort(axes))
        tape.record(out, (x,), lambda g: (g.transpose(inv),))
    return out


def getitem(x: Tensor, idx) -> Tensor:
    tape = _active(x)
    out = _out(x.data[idx], tape)
    if tape:
        shape, dtype = x.shape, x.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        tape.record(out, (x,), back)
    return out


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dims."""
    tape = _active(a, b)
    out = _out(a.data @ b.data, tape)
    if tape:
        ad, bd = a.data, b.data

        def back(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                if bd.ndim == 2:
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

        tape.record(out, (a, b), back)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    # one 2-D GEMM instead of numpy's per-batch loop over leading axes
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd
    if b is not None:
        y += b.data
    y = y.reshape(xd.shape[:-1] + (wd.shape[1],))
    tape = _active(x, w, b)
    out = _out(y, tape)
    if tape:

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
            gw = x2.T @ g2 if w.requires_grad else None
            gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
            return gx, gw, gb

        tape.record(out, (x, w, b), back)
    return out


# --- normalisation / attention ----------------------------------------------


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean, unit population variance (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    tape = _active(x)
    out = _out(xhat, tape)
    if tape:

        def back(g):
            gm = g.mean(axis=-1, keepdims=True)
            gxm = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - xhat * gxm),)

        tape.record(out, (x,), back)
    return out


def _softmax(xd: np.ndarray) -> np.ndarray:
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    y = _softmax(x.data)
    tape = _active(x)
    out = _out(y, tape)
    if tape:
        tape.record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))
    return out


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Full softmax(q kᵀ / sqrt(d_k)) v over the last two axes ``(..., n, d_k)``."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    p = _softmax((qd @ np.swapaxes(kd, -1, -2)) * scale)
    tape = _active(q, k, v)
    out = _out(p @ vd, tape)
    if tape:

        def back(g):
            gv = np.swapaxes(p, -1, -2) @ g
            gp = g @ np.swapaxes(vd, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

        tape.record(out, (q, k, v), back)
    return out


# --- reductions / losses ----------------------------------------------------


def tensor_sum(x: Tensor) -> Tensor:
    tape = _active(x)
    out = _out(np.asarray(x.data.sum(), dtype=x.dtype), tape)
    if tape:
        tape.record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    tape = _active(x)
    out = _out(np.asarray(x.data.mean(), dtype=x.dtype), tape)
    if tape:
        tape.record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    return out


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _wrap(target, pred.data)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    tape = _active(pred, target)
    out = _out(np.asarray((diff * diff).mean(), dtype=pred.dtype), tape)
    if tape:

        def back(g):
            gp = diff * (2.0 * g / n)
            return gp, (-gp if target.requires_grad else None)

        tape.record(out, (pred, target), back)
    return out


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: list[tuple[str, int, float, float]]  # (name, flat index, analytic, numeric)
    floor: float = 0.0

    def worst(self) -> tuple[str, int, float, float]:
        return max(self.probes, key=lambda p: _rel(p[2], p[3], self.floor))

    def max_error_for(self, prefix: str) -> float:
        return max((_rel(a, n, self.floor) for name, _, a, n in self.probes if name.startswith(prefix)), default=0.0)


def _rel(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(
    forward: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    probes: int = 20,
    h: float = 1e-4,
    seed: int = 0,
    dtype=np.float64,
    names: Sequence[str] | None = None,
    floor: float | None = None,
) -> GradCheckResult:
    """Compare tape gradients against float64 central differences.

    ``forward`` maps a dict of parameter tensors to a scalar loss. The analytic
    pass runs in ``dtype``; the numeric oracle always runs in float64.
    ``probes`` random entries are drawn from each name in ``names``
    (default: all parameters). Relative errors use
    ``max(|analytic|, |numeric|, floor)`` as denominator; the default floor is
    1e-5 of the largest probed numeric gradient, so entries whose true
    gradient is zero do not dominate.
    """
    names = list(names) if names is not None else list(params)
    shadow = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays) -> float:
        return float(forward({k: Tensor(a) for k, a in arrays.items()}).data)

    base = evaluate(shadow)
    if evaluate(shadow) != base:
        raise NonDeterministicError("forward returned different values for identical inputs")

    leaves = {k: Tensor(np.asarray(v, dtype=dtype).copy(), requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = forward(leaves)
    g = tape.backward(loss)
    analytic = {k: g.get(t, np.zeros_like(t.data)) for k, t in leaves.items()}

    rng = np.random.default_rng(seed)
    results = []
    for name in names:
        arr = shadow[name]
        picks = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
        for idx in picks:
            flat = arr.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + h
            fp = evaluate(shadow)
            flat[idx] = orig - h
            fm = evaluate(shadow)
            flat[idx] = orig
            numeric = (fp - fm) / (2 * h)
            results.append((name, int(idx), float(analytic[name].reshape(-1)[idx]), numeric))
    if floor is None:
        floor = max([1e-5 * abs(n) for *_, n in results] + [1e-12])
    worst = max((_rel(a, n, floor) for _, _, a, n in results), default=0.0)
    return GradCheckResult(worst, results, floor)
