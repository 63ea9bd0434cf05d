"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation appends its output to a process-global tape
that is rebuilt each forward pass (dynamic tape). ``backward`` walks the tape
in reverse execution order, which is always a valid reverse topological
order, and accumulates gradients into every tensor that requires them.
``gradcheck`` verifies analytic gradients against central finite differences
and is the standing oracle for the whole op suite.

All arithmetic is 64-bit; finite-difference tolerances are meaningless in
32-bit, so no mixed-precision path exists here.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPE: list["Tensor"] = []
_GRAD_ENABLED: bool = True

LAYERNORM_EPS = 1e-5


class Tensor:
    """N-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        """Reset the gradient accumulator to exact zeros."""
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor that is cut out of the recorded graph."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, float(other))

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Tensor:
    """Leaf tensor that owns its storage and accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure numeric evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def clear_tape() -> None:
    """Drop all recorded operations; call once per training step."""
    _TAPE.clear()


def tape_length() -> int:
    return len(_TAPE)


def _tracing(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _record(out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
    out.requires_grad = True
    out._backward = backward
    _TAPE.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into every requires_grad tensor reachable from loss.

    Leaf gradients accumulate across calls: running backward twice without
    zero_grad doubles them. Gradients of recorded intermediates reflect the
    most recent call only.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    for t in _TAPE:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    if loss._backward is None:
        return  # constant w.r.t. everything recorded
    started = False
    for t in reversed(_TAPE):
        if t is loss:
            started = True
        if not started or t.grad is None or t._backward is None:
            continue
        t._backward(t.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        def bk(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(g, b.data.shape))
        _record(out, bk)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        def bk(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(-g, b.data.shape))
        _record(out, bk)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        def bk(g, a=a, b=b):
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
        _record(out, bk)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    if _tracing(a, b):
        od = out.data
        def bk(g, a=a, b=b, od=od):
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            _accumulate(b, _unbroadcast(-g * od / b.data, b.data.shape))
        _record(out, bk)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    if _tracing(a):
        def bk(g, a=a, s=s):
            _accumulate(a, g * s)
        _record(out, bk)
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    if _tracing(a):
        def bk(g, a=a):
            _accumulate(a, g)
        _record(out, bk)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    if _tracing(a):
        od = out.data
        def bk(g, a=a, od=od):
            _accumulate(a, g * od)
        _record(out, bk)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _tracing(a):
        def bk(g, a=a):
            _accumulate(a, g / a.data)
        _record(out, bk)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); sigmoid written via tanh so large inputs never overflow."""
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(a.data * s)
    if _tracing(a):
        def bk(g, a=a, s=s):
            _accumulate(a, g * (s + a.data * s * (1.0 - s)))
        _record(out, bk)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy-style batch broadcasting."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        def bk(g, a=a, b=b):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
        _record(out, bk)
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    if _tracing(a):
        inv = tuple(np.argsort(axes))
        def bk(g, a=a, inv=inv):
            _accumulate(a, np.transpose(g, inv))
        _record(out, bk)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    if _tracing(a):
        def bk(g, a=a):
            _accumulate(a, g.reshape(a.data.shape))
        _record(out, bk)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _tracing(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        def bk(g, tensors=tuple(tensors), sizes=sizes, axis=axis):
            start = 0
            index = [slice(None)] * g.ndim
            for t, n in zip(tensors, sizes):
                index[axis] = slice(start, start + n)
                _accumulate(t, g[tuple(index)])
                start += n
        _record(out, bk)
    return out


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (tuple of slice objects); gradient scatters back into place."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise ValueError("slice_ accepts slice objects only")
    out = Tensor(a.data[key].copy())
    if _tracing(a):
        def bk(g, a=a, key=key):
            full = np.zeros_like(a.data)
            full[key] = g
            _accumulate(a, full)
        _record(out, bk)
    return out


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _tracing(a):
        def bk(g, a=a, axis=axis, keepdims=keepdims):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.data.shape))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        _record(out, bk)
    return out


def l2_norm_rows(a: Tensor, keepdims: bool = False) -> Tensor:
    """Euclidean norm of each slice along the last axis."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    out = Tensor(n if keepdims else n[..., 0])
    if _tracing(a):
        def bk(g, a=a, n=n, keepdims=keepdims):
            gk = g if keepdims else g[..., None]
            coef = np.divide(gk, n, out=np.zeros_like(n), where=n > 0)
            _accumulate(a, coef * a.data)
        _record(out, bk)
    return out


def detach(a: Tensor) -> Tensor:
    return a.detach()


# ---------------------------------------------------------------------------
# normalized / fused ops


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for overflow safety."""
    if not np.isfinite(a.data).all():
        raise ValueError("softmax input must be finite")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    if _tracing(a):
        def bk(g, a=a, p=p):
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(a, p * (g - dot))
        _record(out, bk)
    return out


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over allowed positions of the last axis; masked entries are exactly 0.

    ``mask`` is a boolean array broadcastable to ``a``; True marks allowed
    positions. Every slice must keep at least one allowed position.
    """
    neg = np.where(mask, a.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("masked_softmax: a slice has no allowed positions")
    e = np.exp(neg - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    if _tracing(a):
        def bk(g, a=a, p=p):
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(a, _unbroadcast(p * (g - dot), a.data.shape))
        _record(out, bk)
    return out


def log_softmax_lastdim(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(ls)
    if _tracing(a):
        p = np.exp(ls)
        def bk(g, a=a, p=p):
            _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))
        _record(out, bk)
    return out


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layernorm gain/bias must match the last extent")
    inv_d = 1.0 / d
    xc = a.data - a.data.sum(axis=-1, keepdims=True) * inv_d
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _tracing(a, gain, bias):
        def bk(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d, inv_d=inv_d):
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accumulate(bias, g.reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                dxh = g * gain.data
                m1 = dxh.sum(axis=-1, keepdims=True) * inv_d
                m2 = (dxh * xhat).sum(axis=-1, keepdims=True) * inv_d
                _accumulate(a, inv * (dxh - m1 - xhat * m2))
        _record(out, bk)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")
    out = Tensor(table.data[ids])
    if _tracing(table):
        def bk(g, table=table, ids=ids):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accumulate(table, gt)
        _record(out, bk)
    return out


def select_positions(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one row per batch element: out[n] = a[n, idx[n]]."""
    idx = np.asarray(idx)
    n = a.data.shape[0]
    if idx.shape != (n,):
        raise ValueError("select_positions index must be one entry per batch row")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ValueError("select_positions index out of range")
    rows = np.arange(n)
    out = Tensor(a.data[rows, idx])
    if _tracing(a):
        def bk(g, a=a, idx=idx, rows=rows):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            _accumulate(a, full)
        _record(out, bk)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ignored.

    Exactly 0 only when the predicted distribution puts probability 1 on
    every non-ignored target.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects (positions, vocab) logits")
    targets = np.asarray(targets)
    if targets.shape != (logits.data.shape[0],):
        raise ValueError("cross_entropy target count must match logit rows")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is ignored")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= logits.data.shape[1]:
        raise ValueError("cross_entropy target id out of range")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    rows = np.nonzero(valid)[0]
    nll = lse[rows] - logits.data[rows, tv]
    out = Tensor(nll.sum() / count)
    if _tracing(logits):
        def bk(g, logits=logits, lse=lse, rows=rows, tv=tv, count=count):
            p = np.exp(logits.data - lse[:, None])
            dl = np.zeros_like(logits.data)
            dl[rows] = p[rows]
            dl[rows, tv] -= 1.0
            _accumulate(logits, dl * (float(g) / count))
        _record(out, bk)
    return out


# ---------------------------------------------------------------------------
# verification


def gradcheck(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
              delta: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter list to a scalar Tensor and is re-evaluated with
    each coordinate perturbed by +/- delta; relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params = list(params)
    clear_tape()
    zero_grad(params)
    loss = f(params)
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + delta
                hi = float(f(params).data)
                flat[i] = saved - delta
                lo = float(f(params).data)
                flat[i] = saved
                numeric = (hi - lo) / (2.0 * delta)
                err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
                if err > worst:
                    worst = err
    clear_tape()
    return worst
