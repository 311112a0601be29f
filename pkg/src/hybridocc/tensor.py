"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor produced by an op remembers its parents and a backward rule.
Tensors get a monotonically increasing id at creation, so sorting the
reachable nodes by id (descending) yields a valid reverse-topological
order: the implicit tape.
"""
from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "clip",
    "softmax_last",
    "layer_norm",
    "concat_last",
    "stack",
    "backward",
    "grad_check",
    "no_grad",
    "corrupt_backward",
]

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Name of an op whose backward rule is deliberately perturbed; used by the
# gradient-check negative control.
_corrupted_op = None


@contextlib.contextmanager
def corrupt_backward(op_name):
    """Scale the gradients produced by ``op_name`` by 1.01 inside the block."""
    global _corrupted_op
    prev = _corrupted_op
    _corrupted_op = op_name
    try:
        yield
    finally:
        _corrupted_op = prev


class Tensor:
    """An n-dimensional float64 array that can take part in autodiff.

    ``grad`` is only populated on leaves (tensors created by the user with
    ``requires_grad=True``); intermediate gradients live in the backward
    sweep and are discarded afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "node_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.node_id = next(_ids)

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.node_id = next(_ids)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operators
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)

    def bw(g):
        return (g * c,)

    return Tensor._from_op(a.data * c, (a,), bw, "scale")


def matmul(a, b):
    """Batched matrix product over the last two axes.

    Either operand may carry extra leading (batch) axes; they broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


# elementwise unary ops

def _sigmoid(x):
    # exp of a non-positive argument only: no overflow, full relative precision
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    y = _sigmoid(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (x,), bw, "sigmoid")


def tanh(x):
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, (x,), bw, "tanh")


def relu(x):
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def exp(x):
    y = np.exp(x.data)

    def bw(g):
        return (g * y,)

    return Tensor._from_op(y, (x,), bw, "exp")


def log(x):
    def bw(g):
        return (g / x.data,)

    return Tensor._from_op(np.log(x.data), (x,), bw, "log")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient flows only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        return (g * inside,)

    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), bw, "clip")


def dropout_mask(x, mask):
    """Multiply by a fixed (already rescaled) mask; the mask is a constant."""
    return mul(x, Tensor(mask))


# reductions and reshaping

def tsum(x, axis=None):
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape).copy(), (x,), bw, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw, "transpose")


def getitem(x, idx):
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[idx]), (x,), bw, "getitem")


def flip(x, axis):
    def bw(g):
        return (np.flip(g, axis).copy(),)

    return Tensor._from_op(np.flip(x.data, axis).copy(), (x,), bw, "flip")


def concat_last(parts):
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                "concat_last: leading shapes differ: " + ", ".join(str(q.shape) for q in parts)
            )
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]].copy() for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=-1), parts, bw, "concat")


def stack(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if any(p.shape != parts[0].shape for p in parts):
        raise ShapeError("stack: shapes differ: " + ", ".join(str(p.shape) for p in parts))

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor._from_op(np.stack([p.data for p in parts], axis=axis), parts, bw, "stack")


# normalizations

def softmax_last(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each last-axis slice, then apply ``gamma * xhat + beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


# backward sweep

def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack_ = [loss]
    while stack_:
        n = stack_.pop()
        if n.node_id in nodes:
            continue
        nodes[n.node_id] = n
        stack_.extend(p for p in n._parents if p.requires_grad and p.node_id not in nodes)

    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        if _corrupted_op is not None and node.op == _corrupted_op:
            parent_grads = tuple(None if pg is None else pg * 1.01 for pg in parent_grads)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg


# finite-difference oracle

def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f()`` with respect to ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f, x, h=1e-5):
    """Max relative error between autodiff and central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``x``
    (a Tensor, or a list of Tensors that all get checked).  The error for
    one entry is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    backward(f())
    worst = 0.0
    for t in xs:
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        g_fd = numeric_grad(f, t, h)
        err = np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
        if err.size:
            worst = max(worst, float(err.max()))
        t.grad = None
    return worst
