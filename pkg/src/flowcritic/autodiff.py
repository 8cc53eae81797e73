"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and remembers the op that produced it, so any
scalar built from Tensors can be differentiated with ``backward``.  The tape
is dynamic: executing ops in Python order *is* the topological order.  All
computation is CPU numpy in float32 or float64; evaluation is pure, so
repeated runs on the same inputs are bit-identical.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes do not match the op signature."""


class NonFiniteError(FloatingPointError):
    """A value required to be finite is NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """One value on the tape: an ndarray plus the op record that made it."""

    __slots__ = ("data", "grad", "op", "id", "_parents", "_vjp")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=DTYPES.get(dtype, dtype))
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.op = "leaf"
        self.id = next(_ids)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A new leaf sharing this value; gradients never flow through it."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, id={self.id})"

    # arithmetic sugar; the free functions below do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _node(data, parents, vjp, op):
    out = Tensor(data)
    if _grad_enabled:
        out._parents = parents
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.data.shape} with {b.data.shape} "
                         f"(nodes {a.id}, {b.id})") from None


def add(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def mul(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), vjp, "mul")


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape} "
                         f"(nodes {a.id}, {b.id})")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def affine(x, w, b):
    """x @ w + b with a broadcast bias row."""
    return add(matmul(x, w), b)


def exp(x):
    x = _lift(x)
    out_data = np.exp(x.data)
    return _node(out_data, (x,), lambda g: (g * out_data,), "exp")


def log(x):
    x = _lift(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tanh(x):
    x = _lift(x)
    out_data = np.tanh(x.data)
    return _node(out_data, (x,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def sigmoid(x):
    x = _lift(x)
    # stable both sides of zero
    out_data = np.where(x.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(x.data))),
                        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def vjp(g):
        return (g * out_data * (1.0 - out_data),)

    return _node(out_data, (x,), vjp, "sigmoid")


def softplus(x):
    x = _lift(x)
    sig = 1.0 / (1.0 + np.exp(-np.abs(x.data)))

    def vjp(g):
        return (g * np.where(x.data >= 0, sig, 1.0 - sig),)

    return _node(np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data), (x,), vjp, "softplus")


def leaky_relu(x, slope=0.2):
    x = _lift(x)
    pos = x.data > 0

    def vjp(g):
        return (g * np.where(pos, 1.0, slope),)

    return _node(np.where(pos, x.data, slope * x.data), (x,), vjp, "leaky_relu")


def tsum(x, axis=None):
    x = _lift(x)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape),)

    return _node(x.data.sum(axis=axis), (x,), vjp, "sum")


def tmean(x, axis=None):
    x = _lift(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    inv = 1.0 / n

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, x.data.shape),)
        return (np.broadcast_to(np.expand_dims(g * inv, axis), x.data.shape),)

    return _node(x.data.mean(axis=axis), (x,), vjp, "mean")


def reshape(x, shape):
    x = _lift(x)
    return _node(x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.data.shape),), "reshape")


def exact_mean_axis0(x):
    """Correctly-rounded column means (math.fsum accumulation).

    Unlike the order-dependent pairwise sum, this pooling is exactly
    invariant to permuting or duplicating the rows.
    """
    x = _lift(x)
    n = x.data.shape[0]
    sums = np.array([math.fsum(col) for col in x.data.T], dtype=np.float64)
    out = (sums / n).astype(x.data.dtype)
    inv = 1.0 / n

    def vjp(g):
        return (np.broadcast_to((g * inv).astype(x.data.dtype), x.data.shape),)

    return _node(out, (x,), vjp, "exact_mean_axis0")


def gather_cols(x, idx):
    """Select columns ``idx`` of a 2-D tensor. Indices must be unique."""
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_cols: need 2-D input, got {x.data.shape} (node {x.id})")
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, idx] = g
        return (full,)

    return _node(x.data[:, idx], (x,), vjp, "gather_cols")


def scatter_cols(x, idx, values):
    """Copy of ``x`` with columns ``idx`` replaced by ``values``."""
    x, values = _lift(x), _lift(values)
    if x.data.ndim != 2 or values.data.shape != (x.data.shape[0], len(idx)):
        raise ShapeError(f"scatter_cols: {x.data.shape} <- {values.data.shape} at {len(idx)} cols "
                         f"(nodes {x.id}, {values.id})")
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data.copy()
    out_data[:, idx] = values.data

    def vjp(g):
        gx = g.copy()
        gx[:, idx] = 0.0
        return gx, g[:, idx]

    return _node(out_data, (x, values), vjp, "scatter_cols")


def concat_cols(tensors):
    tensors = [_lift(t) for t in tensors]
    widths = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _node(np.concatenate([t.data for t in tensors], axis=1),
                 tuple(tensors), vjp, "concat_cols")


def conv3x3(x, kernel, bias):
    """Valid 3x3 convolution of single-channel images.

    x: [n, H, W], kernel: [C, 3, 3], bias: [C] -> [n, C, H-2, W-2].
    Small-image use only (the 8x8 track).
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    if x.data.ndim != 3 or kernel.data.shape[1:] != (3, 3):
        raise ShapeError(f"conv3x3: x {x.data.shape}, kernel {kernel.data.shape} "
                         f"(nodes {x.id}, {kernel.id})")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (3, 3), axis=(1, 2))
    out_data = np.einsum("nhwij,cij->nchw", windows, kernel.data) \
        + bias.data[None, :, None, None]

    def vjp(g):
        gk = np.einsum("nchw,nhwij->cij", g, windows)
        gb = g.sum(axis=(0, 2, 3))
        gpad = np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2)))
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (3, 3), axis=(2, 3))
        gx = np.einsum("nchwij,cij->nhw", gwin, kernel.data[:, ::-1, ::-1])
        return gx, gk, gb

    return _node(out_data, (x, kernel, bias), vjp, "conv3x3")


def assert_finite(x, where=""):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        node = f" (node {x.id})" if isinstance(x, Tensor) else ""
        raise NonFiniteError(f"non-finite value in {where or 'tensor'}{node}")
    return x


def backward(out):
    """Reverse sweep from a scalar output; gradients land on reachable leaves.

    Grads of the reachable subtape are reset first, so calling backward
    repeatedly on the same tape (e.g. per output coordinate) is safe.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward: seed must be scalar, got shape {out.data.shape} "
                         f"(node {out.id})")
    topo = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in topo:
        node.grad = None
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


class Parameters:
    """Named trainable leaf tensors, in insertion order."""

    def __init__(self):
        self._slots: dict[str, Tensor] = {}

    def add(self, name, array, dtype=None):
        if name in self._slots:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(array, copy=True), dtype=dtype)
        self._slots[name] = t
        return t

    def __getitem__(self, name):
        return self._slots[name]

    def __contains__(self, name):
        return name in self._slots

    def __len__(self):
        return len(self._slots)

    def names(self):
        return list(self._slots)

    def items(self):
        return self._slots.items()

    def tensors(self):
        return list(self._slots.values())

    def zero_grad(self):
        for t in self._slots.values():
            t.grad = None

    def grads(self):
        """Named gradient arrays; parameters the loss never touched get zeros."""
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._slots.items()}

    def arrays(self):
        return {n: t.data for n, t in self._slots.items()}

    def load_arrays(self, arrays):
        for n, t in self._slots.items():
            if n not in arrays:
                raise KeyError(f"missing parameter {n!r}")
            arr = np.asarray(arrays[n], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {n!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def copy_arrays(self):
        return {n: t.data.copy() for n, t in self._slots.items()}


def grad_check(scalar_fn, point, eps=1e-5):
    """Max relative error between reverse-mode and central-difference grads.

    ``scalar_fn`` maps one Tensor to a scalar Tensor.  Returns
    max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = point if isinstance(point, Tensor) else Tensor(point)
    out = scalar_fn(point)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: fn output has shape {out.data.shape}")
    backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)

    base = point.data
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] += eps
            hi = scalar_fn(Tensor(probe.reshape(base.shape))).data
            probe[i] -= 2 * eps
            lo = scalar_fn(Tensor(probe.reshape(base.shape))).data
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"grad_check: non-finite fn value near coordinate {i}")
            flat[i] = (float(hi) - float(lo)) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
