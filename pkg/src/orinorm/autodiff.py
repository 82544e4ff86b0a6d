"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation produces a new Tensor recording its parents and a backward
closure; backward() replays the graph in reverse topological order and
accumulates gradients into every leaf with requires_grad set. Only the
operator set the normal-estimation network needs is provided; no fusion,
no GPU, 64-bit throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import NotScalar, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t, grad):
    # First contribution borrows the array; later ones add out-of-place, so
    # no shared buffer is ever mutated and closures may pass views freely.
    if not t.requires_grad:
        return
    if t.grad is None:
        if grad.shape != t.data.shape:
            grad = np.broadcast_to(grad, t.data.shape)
        t.grad = grad
    else:
        t.grad = t.grad + grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(a.shape, b.shape, "add") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(a.shape, b.shape, "sub") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(a.shape, b.shape, "mul") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(a.shape, b.shape, "div") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / b.data ** 2, b.shape))

    return _make(a.data / b.data, (a, b), backward)


def square(a):
    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data ** 2, (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, 0.5 * g / out_data)

    return _make(out_data, (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (out_data > 0))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed overflow-safely."""
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def backward(g):
        _accumulate(a, g * sig)

    return _make(out_data, (a,), backward)


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 1 or b.data.ndim < 1 or a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(a.shape, b.shape, "matmul")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def cross(a, b):
    """Cross product over trailing 3-vectors."""
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeMismatch(a.shape, b.shape, "cross")

    def backward(g):
        _accumulate(a, _unbroadcast(np.cross(b.data, g), a.shape))
        _accumulate(b, _unbroadcast(np.cross(g, a.data), b.shape))

    return _make(np.cross(a.data, b.data), (a, b), backward)


def normalize(a, eps=1e-12):
    """Normalize trailing-axis vectors to unit length."""
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    safe = np.maximum(norm, eps)
    out_data = a.data / safe

    def backward(g):
        dot = (out_data * g).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - out_data * dot) / safe)

    return _make(out_data, (a,), backward)


# ------------------------------------------------------------- shape / index

def concat(a, b, axis):
    a, b = _lift(a), _lift(b)
    sa = list(a.shape)
    sb = list(b.shape)
    if len(sa) != len(sb):
        raise ShapeMismatch(a.shape, b.shape, "concat")
    sa[axis] = sb[axis] = -1
    if sa != sb:
        raise ShapeMismatch(a.shape, b.shape, "concat")
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _make(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def reshape(a, shape):
    orig = a.shape

    def backward(g):
        _accumulate(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def take_prefix(a, axis, n):
    """Keep the first n entries along axis."""
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(0, n)
    slicer = tuple(slicer)

    def backward(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        _accumulate(a, full)

    return _make(a.data[slicer], (a,), backward)


def index_axis(a, axis, i):
    """Select entry i along axis, dropping that axis."""
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = i
    slicer = tuple(slicer)

    def backward(g):
        full = np.zeros_like(a.data)
        full[slicer] = g
        _accumulate(a, full)

    return _make(a.data[slicer], (a,), backward)


def expand(a, axis, n):
    """Broadcast a size-1 axis to length n."""
    if a.shape[axis] != 1:
        raise ShapeMismatch(a.shape, (n,), "expand")
    target = list(a.shape)
    target[axis] = n

    def backward(g):
        _accumulate(a, g.sum(axis=axis, keepdims=True))

    return _make(np.broadcast_to(a.data, target), (a,), backward)


# ------------------------------------------------------------------ reduces

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_reduce(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean_reduce(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape).copy() / count)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward)


def max_reduce(a, axis, keepdims=False):
    """Max along a single axis; gradient routes to the recorded argmax only
    (first occurrence on ties)."""
    axis = axis % a.data.ndim
    argmax = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(argmax, axis), axis=axis)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        if keepdims:
            g = np.squeeze(g, axis=axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(
            full, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis=axis
        )
        _accumulate(a, full)

    out = _make(out_data, (a,), backward)
    return out


def softmax(a, axis):
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor):
    """Reverse sweep from a scalar loss, accumulating into leaf .grad fields."""
    if loss.data.size != 1:
        raise NotScalar(f"loss has {loss.data.size} elements")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    # non-leaf gradients are scratch space for this sweep; leaf gradients
    # accumulate across sweeps until explicitly zeroed
    for node in topo:
        if node._backward is not None:
            node.grad = None
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(f, params, h=1e-5, max_entries=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    f rebuilds its graph from `params` on every call and returns a scalar
    Tensor. Discontinuities (e.g. max_reduce at an exact tie) legitimately
    produce large reported errors. When max_entries is given and the
    parameters hold more scalar entries than that, a deterministic random
    subset of entries is probed instead of the full sweep (two forward
    passes per entry make the exhaustive check quadratic-ish in model size).
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    zero_grads(params)

    total = sum(p.data.size for p in params)
    selected = None
    if max_entries is not None and total > max_entries:
        chosen = np.sort(np.random.default_rng(seed).choice(
            total, size=max_entries, replace=False))
        selected = set(chosen.tolist())

    worst = 0.0
    base = 0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            if selected is not None and (base + i) not in selected:
                continue
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data)
            flat[i] = orig - h
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            denom = max(1e-8, abs(ana_flat[i]))
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
        base += flat.size
    return worst
