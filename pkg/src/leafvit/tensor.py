"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy array and, when gradients are enabled,
remembers its parents plus a closure that propagates the upstream gradient to
them.  ``backward`` replays those closures over the recorded graph in reverse
topological order, accumulating by addition across fan-out, so every
``requires_grad`` tensor reachable from the loss receives its gradient exactly
once.

Training runs in single precision; ``grad_check`` re-evaluates programs in
double precision, where central finite differences are trustworthy.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

# Tanh-form GELU constant sqrt(2/pi).
_GELU_C = math.sqrt(2.0 / math.pi)

# When True, every op asserts its output is finite (debug aid, off by default).
_check_finite = False

# When False, ops do not record the graph (inference mode).
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def set_debug_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=self.data.dtype)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul_scalar(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self) -> None:
        backward(self)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _raw(data: np.ndarray) -> Tensor:
    """Wrap an op result without graph bookkeeping (fast path)."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = object.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    out.name = None
    return out


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result and record the graph edge."""
    out = _raw(data)
    out.requires_grad = True
    out._parents = parents
    out._vjp = vjp
    return out


def _recording(*tensors: Tensor) -> bool:
    if not _grad_enabled:
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- primitive ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    if not _recording(a, b):
        return _raw(data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    if not _recording(a, b):
        return _raw(data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), vjp)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    c = a.dtype.type(s)
    data = a.data * c
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(g * c)

    return _node(data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands contract over the last two axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = a.data @ b.data
    if not _recording(a, b):
        return _raw(data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _node(data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b over the last axis (bias added in place on the product)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    data = x.data @ w.data
    data += b.data
    if not _recording(x, w, b):
        return _raw(data)
    lead = tuple(range(x.data.ndim - 1))

    def vjp(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(np.tensordot(x.data, g, axes=(lead, lead)))
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(data, (x, w, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    data = a.data.reshape(shape)
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(g.reshape(a.shape))

    return _node(data, (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    data = np.ascontiguousarray(a.data.transpose(axes))
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(g.transpose(inv))

    return _node(data, (a,), vjp)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    data = np.ascontiguousarray(a.data[index])
    if not _recording(a):
        return _raw(data)
    basic = _is_basic_index(index)

    def vjp(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[index] += g
        else:
            np.add.at(buf, index, g)
        a._accumulate(buf)

    return _node(data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    if not _recording(*parts):
        return _raw(data)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(data, tuple(parts), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _node(data, (a,), vjp)


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype, copy=True))

    return _node(data, (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul_scalar(tsum(a, axis), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, a.dtype.type(0))
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(g * mask)

    return _node(data, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = x2 * x            # fresh buffer, shaped like x; reused in place below
    t *= k
    t += x
    t *= c
    np.tanh(t, out=t)
    data = t + x.dtype.type(1.0)
    data *= x
    data *= x.dtype.type(0.5)
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = c * (1.0 + 3.0 * k * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
        a._accumulate(g * da)

    return _node(data, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    data = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _node(data, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x = a.data
    inv_d = 1.0 / d
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc
    xhat *= inv           # xc is a fresh buffer; normalize in place
    data = xhat * gamma.data
    data += beta.data
    if not _recording(a, gamma, beta):
        return _raw(data)

    def vjp(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.sum(axis=-1, keepdims=True) * inv_d
            m2 = (gx * xhat).sum(axis=-1, keepdims=True) * inv_d
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _node(data, (a, gamma, beta), vjp)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    data = a.data * keep
    if not _recording(a):
        return _raw(data)

    def vjp(g):
        a._accumulate(g * keep)

    return _node(data, (a,), vjp)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Backward rule: (softmax - one_hot) / batch.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects b x K logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = np.asarray(-logp[np.arange(b), labels].mean(), dtype=x.dtype)
    if not _recording(logits):
        return _raw(data)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate(g * p / x.dtype.type(b))

    return _node(data, (logits,), vjp)


# -- backward ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# -- gradient checking ---------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central finite differences."""

    passed: bool
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Check the tape gradient of the scalar program ``f`` on ``params``.

    ``f`` is re-run with each parameter element perturbed by +/- h; the central
    difference (f(p+h) - f(p-h)) / 2h is compared to the recorded gradient.
    Parameters should be float64 for the differences to be meaningful.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued program")
    backward(loss)
    tape_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    per_param: dict[str, float] = {}
    with no_grad():
        for idx, p in enumerate(params):
            worst = 0.0
            flat = p.data.reshape(-1)
            gflat = tape_grads[idx].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-2)
                worst = max(worst, abs(fd - gflat[i]) / denom)
            name = p.name or f"param{idx}"
            per_param[name] = worst
            max_rel = max(max_rel, worst)
    return GradCheckReport(passed=max_rel <= tol, max_rel_err=max_rel, per_param=per_param, tol=tol)
