"""Dense float64 tensors with reverse-mode differentiation.

Small on purpose: 2-D matrices and vectors, the handful of ops the encoder,
masking strategies, and task heads need, plus a central finite-difference
checker used to validate every gradient path.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from .exceptions import ContractError, DimensionError, NumericError

LOG_CLAMP = 1e-12
NORM_EPS = 1e-12

# Thread-local so concurrent no_grad evaluation cannot poison other threads.
_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    prev = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = prev


class Tensor:
    """Immutable-by-convention array node in the differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled():
        for p in parents:
            if p.requires_grad:
                out._parents = parents
                out._backward = backward
                out.requires_grad = True
                return out
        for p in parents:
            if p._parents:
                out._parents = parents
                out._backward = backward
                return out
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # `+` (not `+=`): incoming gradients may be views into other buffers
    if t.grad is None:
        t.grad = g if g.base is None and g.dtype == np.float64 else g.astype(np.float64, copy=True)
    else:
        t.grad = t.grad + g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def square(a) -> Tensor:
    return mul(a, a)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul expects compatible 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad or b._parents:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = a.data.T

    def backward(g):
        _accumulate(a, g.T)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    if count == 0:
        raise DimensionError("mean over empty axis")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- indexing ----------------------------------------------------------------


def take(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(data, (a,), backward)


def gather_rows(a: Tensor, ids) -> Tensor:
    """Row lookup (embedding gather); backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    return take(a, ids)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])

    return _make(data, tuple(parts), backward)


def stack_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    return concat([reshape(p, (1, -1)) for p in parts], axis=0)


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form gelu; kept smooth so finite-difference checks stay tight."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * grad)

    return _make(data, (a,), backward)


def log_clamped(a: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """log with the argument clamped below at `floor`; flat gradient under the clamp."""
    a = as_tensor(a)
    safe = np.maximum(a.data, floor)
    data = np.log(safe)

    def backward(g):
        _accumulate(a, g * (a.data > floor) / safe)

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(np.maximum(a.data, 0.0))

    def backward(g):
        _accumulate(a, g * 0.5 / np.maximum(data, NORM_EPS))

    return _make(data, (a,), backward)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi
        _accumulate(a, g * inside)

    return _make(data, (a,), backward)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    return clamp(a, lo=lo)


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to one."""
    v = as_tensor(v)
    if v.data.ndim == 0 or v.data.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {v.data.shape}")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(v, data * (g - dot))

    return _make(data, (v,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b in one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"affine expects compatible 2-D operands, got {x.data.shape} and {w.data.shape}"
        )
    data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad or x._parents:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad or w._parents:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad or b._parents:
            _accumulate(b, g.sum(axis=0))

    return _make(data, (x, w, b), backward)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, scale: float,
                         drop_masks: list[np.ndarray] | None = None):
    """Scaled dot-product attention over column-partitioned heads, fused into
    one node. Returns (merged output, per-head probability maps pre-dropout)."""
    n, hidden = q.data.shape
    if hidden % n_heads != 0:
        raise DimensionError(f"hidden {hidden} not divisible by {n_heads} heads")
    d_k = hidden // n_heads
    probs: list[np.ndarray] = []
    dropped: list[np.ndarray] = []
    out = np.empty((n, hidden))
    for h in range(n_heads):
        cols = slice(h * d_k, (h + 1) * d_k)
        logits = (q.data[:, cols] @ k.data[:, cols].T) * scale
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        probs.append(p)
        pd = p * drop_masks[h] if drop_masks is not None else p
        dropped.append(pd)
        out[:, cols] = pd @ v.data[:, cols]

    def backward(g):
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        for h in range(n_heads):
            cols = slice(h * d_k, (h + 1) * d_k)
            go = g[:, cols]
            dv[:, cols] = dropped[h].T @ go
            dpd = go @ v.data[:, cols].T
            dp = dpd * drop_masks[h] if drop_masks is not None else dpd
            dlogits = probs[h] * (dp - (dp * probs[h]).sum(axis=1, keepdims=True))
            dq[:, cols] = (dlogits @ k.data[:, cols]) * scale
            dk[:, cols] = (dlogits.T @ q.data[:, cols]) * scale
        if q.requires_grad or q._parents:
            _accumulate(q, dq)
        if k.requires_grad or k._parents:
            _accumulate(k, dk)
        if v.requires_grad or v._parents:
            _accumulate(v, dv)

    return _make(out, (q, k, v), backward), probs


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Row-wise layer normalization with learnable gain and bias, fused into
    one node to keep training graphs small."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad or gain._parents:
            _accumulate(gain, (g * xhat).sum(axis=0) if g.ndim > 1 else g * xhat)
        if bias.requires_grad or bias._parents:
            _accumulate(bias, g.sum(axis=0) if g.ndim > 1 else g)
        if x.requires_grad or x._parents:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws the mask from `rng` so runs replay exactly."""
    if rate <= 0.0:
        return a
    a = as_tensor(a)
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


def straight_through(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    """Forward the hard values; route gradients to `soft` unchanged."""
    soft = as_tensor(soft)
    data = np.asarray(hard_values, dtype=np.float64).copy()
    if data.shape != soft.data.shape:
        raise DimensionError(
            f"straight_through shapes differ: {data.shape} vs {soft.data.shape}"
        )

    def backward(g):
        _accumulate(soft, g)

    return _make(data, (soft,), backward)


# -- similarity and pooling ----------------------------------------------------


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """cos(u, v) in [-1, 1]; zero when either vector has negligible norm."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.shape != v.data.shape or u.data.ndim != 1:
        raise DimensionError(
            f"cosine_similarity expects equal-length vectors, got {u.data.shape} and {v.data.shape}"
        )
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu <= NORM_EPS or nv <= NORM_EPS:
        return Tensor(0.0)
    dot = tsum(mul(u, v))
    denom = clamp_min(sqrt(mul(tsum(square(u)), tsum(square(v)))), NORM_EPS)
    return div(dot, denom)


AGGREGATOR_KINDS = ("mean", "median", "sd")


def aggregate(scores: Tensor, kind: str) -> Tensor:
    """Pool a score vector to a scalar: mean, median, or population SD."""
    scores = as_tensor(scores)
    if scores.data.ndim != 1 or scores.data.size == 0:
        raise DimensionError(f"aggregate expects a non-empty vector, got shape {scores.data.shape}")
    kind = kind.lower()
    n = scores.data.size
    if kind == "mean":
        return tmean(scores)
    if kind == "median":
        order = np.argsort(scores.data, kind="stable")
        mid = n // 2
        if n % 2 == 1:
            return take(scores, order[mid])
        lo = take(scores, order[mid - 1])
        hi = take(scores, order[mid])
        return mul(add(lo, hi), 0.5)
    if kind == "sd":
        mu = tmean(scores)
        centered = sub(scores, mu)
        return sqrt(tmean(square(centered)))
    raise ContractError(f"unknown aggregator {kind!r}; expected one of {AGGREGATOR_KINDS}")


# -- backward pass ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate grad buffers for everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p._parents or p.requires_grad):
                stack.append((p, False))
    loss_grad = np.ones_like(loss.data)
    _accumulate(loss, loss_grad)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- parameter store ----------------------------------------------------------------


class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self):
        return self._entries.values()

    def total_count(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def l2_sum(self) -> Tensor:
        """Sum of squares over every entry (the regularizer's norm term)."""
        total = Tensor(0.0)
        for t in self._entries.values():
            total = add(total, tsum(square(t)))
        return total


# -- gradient checking -----------------------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    names: list[str] | None = None,
    return_details: bool = False,
):
    """Compare backward() gradients of the scalar map `f` against central differences.

    Returns the max over checked coordinates of
    |analytic - central| / max(1e-8, |central|); with return_details, also a
    per-parameter dict of the same statistic.
    """
    check_names = list(names) if names is not None else params.names()
    params.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("objective returned a non-finite value")
    backward(out)
    analytic = {
        name: (params[name].grad.copy() if params[name].grad is not None else np.zeros_like(params[name].data))
        for name in check_names
    }

    def value() -> float:
        with no_grad():
            y = f()
        val = float(y.data)
        if not math.isfinite(val):
            raise NumericError("objective returned a non-finite value during probing")
        return val

    details: dict[str, float] = {}
    worst = 0.0
    for name in check_names:
        flat = params[name].data.reshape(-1)
        ana = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            err = max(err, abs(ana[i] - central) / max(1e-8, abs(central)))
        details[name] = err
        worst = max(worst, err)
    if return_details:
        return worst, details
    return worst
