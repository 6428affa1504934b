"""Dense tensors with a reverse-mode tape.

Operations record themselves on the active :class:`GradTape` when at least
one operand requires a gradient; outside a tape everything runs as plain
numpy with no bookkeeping, which is the inference path.

Ops with a data-dependent discrete choice (top-k routing, piecewise losses)
pass that choice through :func:`decide`. A :class:`BranchRecorder` can record
those choices on one evaluation and replay them on later ones, so finite
differences are taken on the same smooth piece that backward differentiates.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels

_state = threading.local()


def _tape():
    return getattr(_state, "tape", None)


def _recorder():
    return getattr(_state, "recorder", None)


class Tensor:
    """An n-d array plus, when tracked, the node that produced it."""

    __slots__ = ("data", "requires_grad", "_inputs", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._inputs = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _pair(a, b):
    # constants adopt the dtype of the tensor operand (keeps float32 inference float32)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _make(data, inputs, backward):
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# tape and branch recording

class GradTape:
    """Records tracked ops in creation order; one tape per training step.

    Creation order is a topological order, so backward is a single reverse
    sweep. The tape is installed for the current thread only.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def backward(self, loss, params):
        return backward(loss, params, tape=self)


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        self._prev = _tape()
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class BranchRecorder:
    """Record discrete choices made via :func:`decide`, or replay them."""

    def __init__(self, choices=None):
        self.replay = choices is not None
        self.choices = list(choices) if choices is not None else []
        self._pos = 0
        self._prev = None

    def __enter__(self):
        self._prev = _recorder()
        _state.recorder = self
        self._pos = 0
        return self

    def __exit__(self, *exc):
        _state.recorder = self._prev
        return False

    def take(self, value):
        if not self.replay:
            self.choices.append(np.array(value, copy=True))
            return value
        if self._pos >= len(self.choices):
            raise RuntimeError("branch replay ran past the recorded choices")
        stored = self.choices[self._pos]
        self._pos += 1
        if stored.shape != np.shape(value):
            raise RuntimeError(f"branch replay shape {stored.shape} != {np.shape(value)}")
        return stored


def decide(value):
    """Pass a data-dependent discrete choice through the active recorder."""
    rec = _recorder()
    return value if rec is None else rec.take(value)


def backward(loss, params, tape=None):
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``params``.

    ``params`` is a mapping name -> Tensor (returns the same keys) or a
    sequence (returns a list). Parameters the loss does not reach get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _tape()
    grads = {id(loss): np.ones_like(loss.data)}
    if loss._backward is not None:
        nodes = tape.nodes if tape is not None else _topo(loss)
        for node in reversed(nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parts = node._backward(g)
            for inp, gi in zip(node._inputs, parts):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    if isinstance(params, Mapping):
        return {k: _grad_or_zero(grads, p) for k, p in params.items()}
    return [_grad_or_zero(grads, p) for p in params]


def _grad_or_zero(grads, p):
    g = grads.get(id(p))
    if g is None:
        return np.zeros_like(p.data)
    return np.asarray(g, dtype=p.data.dtype).reshape(p.shape)


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp._backward is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    a = as_tensor(a)
    sign = decide(np.sign(a.data))
    return _make(sign * a.data, (a,), lambda g: (g * sign,))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # tanh form is overflow-free for either sign
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` else ``b``; ``cond`` is a constant array."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), back)


def logsumexp(a):
    """log Σ exp over the last axis."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    return _make(out, (a,), lambda g: (g[..., None] * e / s,))


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return _make(out, (a, b), back)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ValueError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=ax)))


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), back)


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in parts)


def masked_select(a, mask):
    """1-D tensor of the elements of ``a`` where ``mask`` is true."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"masked_select: shapes {a.shape} and {mask.shape} do not conform")

    def back(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        return (full,)

    return _make(a.data[mask], (a,), back)


def take_rows(a, idx):
    """Rows ``a[idx]`` of a 2-D tensor (gradient scatters back with add)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _make(a.data[idx], (a,),
                 lambda g: (_kernels.scatter_add_rows(n, idx, g),))


def scatter_rows(n_rows, idx, values):
    """``n_rows``×D tensor with ``values[i]`` summed into row ``idx[i]``."""
    values = as_tensor(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = _kernels.scatter_add_rows(n_rows, idx, values.data)
    return _make(out, (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    coords: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float
    flagged: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self):
        return not self.flagged and self.max_rel_err < self.tol

    def summary(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"{state} coords={len(self.coords)} max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tol:g} flagged={len(self.flagged)}")


def relative_error(a, n, floor=1e-8):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f: Callable, theta, h=1e-3, tol=1e-4, n_coords=None, seed=0,
               freeze_branches=True) -> GradCheckReport:
    """Compare backward() against central differences.

    ``theta`` is a Tensor or a mapping of named Tensors; ``f(theta)`` returns
    a scalar Tensor. With ``n_coords`` set, that many coordinates are sampled
    uniformly over all parameters. With ``freeze_branches`` the discrete
    choices of the base evaluation are replayed at θ±h.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(theta, Tensor)
    params = {"theta": theta} if single else dict(theta)
    for p in params.values():
        p.requires_grad = True

    with BranchRecorder() as rec, GradTape() as tape:
        loss = f(theta)
        grads = tape.backward(loss, params)
    choices = rec.choices if freeze_branches else None

    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    total = int(sizes.sum())
    if n_coords is None or n_coords >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, n_coords, replace=False))
    bounds = np.cumsum(sizes)

    def evaluate():
        with no_grad(), BranchRecorder(choices) if choices is not None else _null():
            return float(f(theta).data)

    coords, ana, num, flagged = [], [], [], []
    for c in flat:
        which = int(np.searchsorted(bounds, c, side="right"))
        name = names[which]
        local = int(c - (bounds[which - 1] if which else 0))
        arr = params[name].data
        orig = arr.flat[local]
        arr.flat[local] = orig + h
        fp = evaluate()
        arr.flat[local] = orig - h
        fm = evaluate()
        arr.flat[local] = orig
        coords.append((name, local))
        ana.append(grads[name].reshape(-1)[local])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            flagged.append((name, local))
            num.append(np.nan)
            continue
        num.append((fp - fm) / (2.0 * h))

    ana, num = np.array(ana), np.array(num)
    err = relative_error(ana, num)
    err = np.where(np.isfinite(err), err, np.inf)
    return GradCheckReport(coords, ana, num, err, tol, flagged)


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False
