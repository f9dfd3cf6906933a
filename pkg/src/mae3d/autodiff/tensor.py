"""Dense numpy tensors with reverse-mode differentiation.

Each op computes its output eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients. ``backward``
walks the recorded graph in reverse topological order, summing gradients at
fan-out points. Only leaf tensors (parameters) keep their ``.grad``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .. import kernels

_state = {"grad": True, "flops": None}


class ShapeError(ValueError):
    pass


class FlopCounter:
    """Multiply-add FLOPs (2 per MAC) of the matmul-type ops run while active."""

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_flops():
    prev = _state["flops"]
    counter = FlopCounter()
    _state["flops"] = counter
    try:
        yield counter
    finally:
        _state["flops"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def _count(op, n):
    c = _state["flops"]
    if c is not None:
        c.add(op, int(n))


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------ autodiff
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------ operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return tmax(self, axis, keepdims)

    def relu(self):
        return relu(self)


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------------- elementwise

def _needs(t):
    return t.requires_grad


def add(a, b):
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if _needs(a) else None,
                              _unbroadcast(g, b.shape) if _needs(b) else None))


def sub(a, b):
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape) if _needs(a) else None,
                              _unbroadcast(-g, b.shape) if _needs(b) else None))


def mul(a, b):
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if _needs(a) else None,
                              _unbroadcast(g * a.data, b.shape) if _needs(b) else None))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if _needs(a) else None,
                              _unbroadcast(-g * out / b.data, b.shape) if _needs(b) else None))


def power(a, p):
    if isinstance(p, Tensor):
        raise TypeError("only constant exponents are supported")
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(0.5 * x * (1.0 + t), (a,), back)


def dropout(a, p, rng, training=True):
    """Inverted dropout: kept units are scaled by 1/(1-p) so inference is the identity."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _count("matmul", 2 * out.size * a.shape[-1])

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    _count("linear", 2 * x2.shape[0] * w.shape[0] * w.shape[1])

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out.reshape(*lead, w.shape[1]), parents, back)


# ---------------------------------------------------------------------- normalization

def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), back)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return mul(tsum(picked), -1.0 / len(labels))


# ---------------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / n)


def tmax(a, axis=-1, keepdims=False):
    """Max over one axis; the gradient goes to the first arg-max."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis, keepdims=True)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), back)


# ---------------------------------------------------------------------- shape

def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape):
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch along axis {axis}: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def _is_basic(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)


def getitem(a, key):
    basic = _is_basic(key)

    def back(g):
        gx = np.zeros_like(a.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(a.data[key], (a,), back)


def gather(a, idx):
    """Select rows along axis 1 per batch item: ``out[b, t] = a[b, idx[b, t]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim < 2 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather expects (B, S, ...) data and (B, T) indices, got {a.shape}, {idx.shape}")
    bsz, s = a.shape[:2]
    rows = np.arange(bsz)[:, None]
    out = a.data[rows, idx]

    def back(g):
        gx = np.zeros((bsz * s,) + a.shape[2:], dtype=a.dtype)
        flat = (rows * s + idx).ravel()
        np.add.at(gx, flat, g.reshape((-1,) + a.shape[2:]))
        return (gx.reshape(a.shape),)

    return _result(out, (a,), back)


# ---------------------------------------------------------------------- chamfer

def chamfer(a, b):
    """Chamfer distance with squared Euclidean terms.

    Accepts (N, 3)/(M, 3) clouds or (B, N, 3)/(B, M, 3) batches and returns a
    scalar or a (B,) vector. Nearest neighbours are found in double precision;
    the gradient is routed through the recorded arg-min.
    """
    a, b = _pair(a, b)
    batched = a.ndim == 3
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != 3 or b.shape[-1] != 3 \
            or (batched and a.shape[0] != b.shape[0]):
        raise ShapeError(f"chamfer expects matching (..., N, 3) clouds, got {a.shape} and {b.shape}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ShapeError("chamfer distance of an empty cloud")
    A = a.data if batched else a.data[None]
    B = b.data if batched else b.data[None]
    nb, n, m = A.shape[0], A.shape[1], B.shape[1]
    out = np.empty(nb, dtype=np.result_type(a.dtype, b.dtype))
    nn_ab = np.empty((nb, n), dtype=np.int64)
    nn_ba = np.empty((nb, m), dtype=np.int64)
    for i in range(nb):
        d1, nn_ab[i] = kernels.nearest(A[i], B[i])
        d2, nn_ba[i] = kernels.nearest(B[i], A[i])
        out[i] = d1.mean() + d2.mean()

    def _scatter(vals, idx, size):
        # sum rows of vals (nb, k, 3) into (nb, size, 3) at idx (nb, k)
        out = np.empty((nb, size, 3), dtype=vals.dtype)
        for i in range(nb):
            for c in range(3):
                out[i, :, c] = np.bincount(idx[i], weights=vals[i, :, c], minlength=size)
        return out

    def back(g):
        g = np.asarray(g).reshape(nb, 1, 1)
        rows = np.arange(nb)[:, None]
        t_ab = (2.0 / n) * g * (A - B[rows, nn_ab])  # d/dA of the A->B term, (nb, n, 3)
        t_ba = (2.0 / m) * g * (B - A[rows, nn_ba])  # d/dB of the B->A term, (nb, m, 3)
        ga = gb = None
        if a.requires_grad:
            ga = t_ab - _scatter(t_ba, nn_ba, n)
            ga = (ga if batched else ga[0]).astype(a.dtype, copy=False)
        if b.requires_grad:
            gb = t_ba - _scatter(t_ab, nn_ab, m)
            gb = (gb if batched else gb[0]).astype(b.dtype, copy=False)
        return ga, gb

    return _result(out if batched else out[0], (a, b), back)
