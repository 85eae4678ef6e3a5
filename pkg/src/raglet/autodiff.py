"""Dense tensors with reverse-mode automatic differentiation.

Eager tape AD over numpy arrays: every op attaches a backward closure to its
output, `backward` walks the recorded graph in reverse and accumulates
gradients into leaves. Arrays stay in whatever float dtype the caller chose --
tests run in float64 so finite-difference checks are meaningful, training runs
in float32.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """numpy array plus the metadata reverse mode needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zero(self) -> np.ndarray:
        """Gradient after backward; leaves the loss never touched get zeros."""
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _coerce_const(x, like: Tensor) -> Tensor:
    """Wrap scalars/arrays as constants in the dtype of `like` (no upcasting)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    req = _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
    return out


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_const(b, a)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_const(b, a)
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))
        out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_const(b, a)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
        out._backward = bwd
    return out


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_const(b, a)
    out = _result(a.data / b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = bwd
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _result(np.exp(a.data), (a,))
    if out.requires_grad:
        y = out.data
        out._backward = lambda g: _accumulate(a, g * y)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _result(np.log(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _result(np.sqrt(a.data), (a,))
    if out.requires_grad:
        y = out.data
        out._backward = lambda g: _accumulate(a, g / (2.0 * y))
    return out


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _result(np.tanh(a.data), (a,))
    if out.requires_grad:
        y = out.data
        out._backward = lambda g: _accumulate(a, g * (1.0 - y * y))
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = _result(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        pos = a.data > 0
        out._backward = lambda g: _accumulate(a, g * pos)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form gelu; smooth everywhere, so finite differences behave."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = _result(0.5 * x * (1.0 + t), (a,))
    if out.requires_grad:
        def bwd(g):
            du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
        out._backward = bwd
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def bwd(g):
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                g = np.expand_dims(g, ax)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        out._backward = bwd
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.transpose(axes), (a,))
    if out.requires_grad:
        inv = np.argsort(axes)
        out._backward = lambda g: _accumulate(a, g.transpose(inv))
    return out


def getitem(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter-back."""
    a = as_tensor(a)
    out = _result(a.data[key], (a,))
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[key] = g
            _accumulate(a, full)
        out._backward = bwd
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(np.broadcast_to(a.data, shape).copy(), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, _unbroadcast(g, a.shape))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading dims with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(a, _unbroadcast(ga, a.shape))
            _accumulate(b, _unbroadcast(gb, b.shape))
        out._backward = bwd
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    out = _result(table.data[ids], (table,))
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# fused / model-facing ops


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be ({d},), got {gain.shape}/{shift.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(gain.data * xhat + shift.data, (x, gain, shift))
    if out.requires_grad:
        def bwd(g):
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            _accumulate(shift, g.reshape(-1, d).sum(axis=0))
            dxhat = g * gain.data
            gx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)
        out._backward = bwd
    return out


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / n
    out = _result(y, (x,))
    if out.requires_grad:
        def bwd(g):
            _accumulate(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / n)
        out._backward = bwd
    return out


def masked_biased_softmax(logits: Tensor, bias: Tensor | None, mask: np.ndarray | None) -> Tensor:
    """softmax(logits + bias) along the last axis with hard masking.

    `mask` is a boolean array broadcastable to the logits; True blocks an
    entry. Blocked entries come out exactly 0 and receive exactly 0 gradient.
    Rows where everything is blocked come out all-zero (no normalization).
    """
    logits = as_tensor(logits)
    if np.isnan(logits.data).any() or (bias is not None and np.isnan(bias.data).any()):
        raise NumericError("masked_biased_softmax got NaN inputs")
    z = logits.data + bias.data if bias is not None else logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        zmax = np.where(mask, -np.inf, z).max(axis=-1, keepdims=True)
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)  # all-blocked rows
        e = np.where(mask, 0.0, np.exp(z - zmax))
    else:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
    denom = e.sum(axis=-1, keepdims=True)
    p = e / np.where(denom == 0.0, 1.0, denom)
    parents = (logits,) if bias is None else (logits, bias)
    out = _result(p.astype(z.dtype, copy=False), (*parents,))
    if out.requires_grad:
        def bwd(g):
            dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
            _accumulate(logits, _unbroadcast(dz, logits.shape))
            if bias is not None:
                _accumulate(bias, _unbroadcast(dz, bias.shape))
        out._backward = bwd
    return out


def token_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-position -log softmax(logits)[target], fused with log-softmax.

    logits: (..., V); targets: integer array of shape (...,). Returns the
    same leading shape as targets, in nats.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range for vocab {v}")
    zmax = logits.data.max(axis=-1, keepdims=True)
    zs = logits.data - zmax
    lse = np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(zs, targets[..., None], axis=-1)
    out = _result((lse - picked)[..., 0], (logits,))
    if out.requires_grad:
        def bwd(g):
            soft = np.exp(zs - lse)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            _accumulate(logits, g[..., None] * (soft - onehot))
        out._backward = bwd
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of token_nll over all positions (scalar, nats)."""
    return mean(token_nll(logits, targets))


# ---------------------------------------------------------------------------
# backward pass


def linearize(loss: Tensor) -> list[Tensor]:
    """Recorded graph reachable from `loss`, in a topological (recording) order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not (loss.requires_grad or loss._backward is not None):
        return
    order = linearize(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_err.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5, tol: float = 1e-3,
               max_coords: int = 16, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    Large leaves are probed at `max_coords` seeded-random coordinates, small
    ones exhaustively. Relative error uses max(|analytic|, |fd|, 1e-6) as the
    denominator so exactly-zero gradients compare cleanly.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: p.grad_or_zero().copy() for name, p in params.items()}

    rng = np.random.Generator(np.random.Philox(seed))
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            with no_grad():
                lp = f().item()
            flat[idx] = orig - h
            with no_grad():
                lm = f().item()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
        report[name] = worst
    return GradCheckReport(max_rel_err=report, tol=tol)
