"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every op output gets a monotonically increasing ``node_id``; inputs are
always created before outputs, so sorting reachable nodes by descending id
gives a valid reverse topological order. No broadcasting anywhere: shapes
must match exactly, and the few explicit coercions (``add_bias``, ``mix``)
are separate ops.
"""
import itertools
import math

import numpy as np

from amtml import kernels
from amtml.errors import ParameterError, ShapeError

_node_ids = itertools.count(1)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op=None):
        if _backward is None:
            data = np.array(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self.node_id = next(_node_ids) if _backward is not None else 0

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _not_scalar(t):
    raise ShapeError(f"expected a scalar tensor, got dims {t.dims}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, _parents=(), _backward=_noop, op=op)
    return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)


def _noop(g):
    return ()


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable
    from ``loss`` that requires grad. Calling twice without zeroing doubles
    the gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t.node_id, reverse=True)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.dims} x {b.dims}")
    av, bv = a.data, b.data

    def bw(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), bw, "matmul")


def elementwise(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: dims {a.dims} and {b.dims} differ")
    av, bv = a.data, b.data
    if kind == "add":
        return _result(av + bv, (a, b), lambda g: (g, g), "add")
    if kind == "sub":
        return _result(av - bv, (a, b), lambda g: (g, -g), "sub")
    if kind == "mul":
        return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")
    raise ParameterError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def neg(x):
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c):
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x, b):
    """Add a per-feature bias: ``x`` is batch x n (or n x C x H x W with a
    length-C bias applied per channel)."""
    if x.data.ndim == 2 and b.shape == (x.shape[1],):
        return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    if x.data.ndim == 4 and b.shape == (x.shape[1],):
        out = x.data + b.data[None, :, None, None]
        return _result(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")
    raise ShapeError(f"add_bias: bias dims {b.dims} do not fit input dims {x.dims}")


def reshape(x, shape):
    shape = tuple(shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"cannot reshape {x.dims} to {list(shape)}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten_batch(x):
    return reshape(x, (x.shape[0], -1 if x.data.size == 0 else x.data.size // x.shape[0]))


# -- pointwise --------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x):
    xv = x.data
    if np.any(xv <= 0):
        raise ParameterError("log of a non-positive value")
    return _result(np.log(xv), (x,), lambda g: (g / xv,), "log")


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


# -- reductions -------------------------------------------------------------

def sum(x):
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x):
    shape, n = x.shape, x.data.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_rows(x):
    """Row sums of a batch x n matrix -> length-batch vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows expects rank 2, got {x.dims}")
    n = x.shape[1]
    return _result(x.data.sum(axis=1), (x,), lambda g: (np.repeat(g[:, None], n, axis=1),), "sum_rows")


def dot(a, b):
    return sum(mul(a, b))


def normalize(x, eps=0.0):
    """x / ||x||_2 for a vector."""
    xv = x.data
    n = float(np.sqrt((xv * xv).sum()))
    if n <= eps:
        raise ParameterError("cannot normalize a (near) zero vector")
    out = xv / n

    def bw(g):
        return ((g - out * (g * out).sum()) / n,)

    return _result(out, (x,), bw, "normalize")


# -- softmax family ---------------------------------------------------------

def softmax_t(logits, temperature=1.0):
    """Temperature softmax over the last axis (rank 1 or 2)."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if logits.data.ndim not in (1, 2):
        raise ShapeError(f"softmax_t expects rank 1 or 2, got {logits.dims}")
    T = float(temperature)
    z = logits.data / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / T,)

    return _result(p, (logits,), bw, "softmax_t")


def log_softmax_t(logits, temperature=1.0):
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if logits.data.ndim not in (1, 2):
        raise ShapeError(f"log_softmax_t expects rank 1 or 2, got {logits.dims}")
    T = float(temperature)
    z = logits.data / T
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / T,)

    return _result(out, (logits,), bw, "log_softmax_t")


def pick(x, index):
    """Select ``x[i, index[i]]`` for each row -> length-batch vector."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: index of length {index.shape} does not fit {x.dims}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _result(x.data[rows, index], (x,), bw, "pick")


def column(x, j):
    """Column ``j`` of a batch x m matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"column expects rank 2, got {x.dims}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return _result(x.data[:, j].copy(), (x,), bw, "column")


def stack_columns(cols):
    """Stack m length-batch vectors into a batch x m matrix."""
    n = cols[0].shape
    for c in cols:
        if c.shape != n or c.data.ndim != 1:
            raise ShapeError("stack_columns needs equal-length vectors")
    data = np.stack([c.data for c in cols], axis=1)
    return _result(data, tuple(cols), lambda g: tuple(g[:, j].copy() for j in range(g.shape[1])), "stack_columns")


def mix(weights, sources):
    """out[i] = sum_t weights[i, t] * sources[t, i] (batch x m, m x batch x K)."""
    w, s = weights.data, sources.data
    if w.ndim != 2 or s.ndim != 3 or s.shape[0] != w.shape[1] or s.shape[1] != w.shape[0]:
        raise ShapeError(f"mix: weights {weights.dims} incompatible with sources {sources.dims}")
    out = np.einsum("it,tik->ik", w, s)

    def bw(g):
        return np.einsum("ik,tik->it", g, s), np.einsum("ik,it->tik", g, w)

    return _result(out, (weights, sources), bw, "mix")


# -- spatial ----------------------------------------------------------------

def global_max_pool(feature_map):
    """C x H x W -> C; gradient goes to the first row-major argmax."""
    if feature_map.data.ndim != 3:
        raise ShapeError(f"global_max_pool expects rank 3 (C x H x W), got {feature_map.dims}")
    out = batch_global_max_pool(reshape(feature_map, (1,) + feature_map.shape))
    return reshape(out, (feature_map.shape[0],))


def batch_global_max_pool(x):
    """N x C x H x W -> N x C."""
    if x.data.ndim != 4:
        raise ShapeError(f"batch_global_max_pool expects rank 4, got {x.dims}")
    data = np.ascontiguousarray(x.data)
    vals, idx = kernels.max_pool_argmax(data)
    h, w = x.shape[2], x.shape[3]

    def bw(g):
        return (kernels.max_pool_backward(np.ascontiguousarray(g), idx, h, w),)

    return _result(vals, (x,), bw, "global_max_pool")


def conv2d(x, w, b):
    """Same-padded stride-1 convolution; w is O x C x k x k with odd k."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.dims}, weight {w.dims}, bias {b.dims} do not chain")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {w.dims[2:]}")
    xv = np.ascontiguousarray(x.data)
    wv = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xv, wv, np.ascontiguousarray(b.data))

    def bw(g):
        return kernels.conv2d_backward(xv, wv, np.ascontiguousarray(g))

    return _result(np.asarray(out), (x, w, b), bw, "conv2d")


# -- losses that need fused kernels -----------------------------------------

def huber(x, y):
    """Huber penalty of the difference of two same-shaped tensors, summed."""
    if x.shape != y.shape:
        raise ShapeError(f"huber: dims {x.dims} and {y.dims} differ")
    d = x.data - y.data
    ad = np.abs(d)
    small = ad <= 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5).sum()
    slope = np.where(small, d, np.sign(d))
    return _result(np.array(out), (x, y), lambda g: (g * slope, -g * slope), "huber")


def angle_huber_mean(target, student, triplets, eps=1e-8):
    """Mean Huber distance between triplet angle cosines of two batch x K
    matrices; triplets degenerate on either side are skipped."""
    if target.shape != student.shape or target.data.ndim != 2:
        raise ShapeError(f"angle loss: dims {target.dims} and {student.dims} must match (rank 2)")
    trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    total, count, g_t, g_s = kernels.angle_huber(
        np.ascontiguousarray(target.data), np.ascontiguousarray(student.data), trip, float(eps)
    )
    if count == 0:
        return _result(np.array(0.0), (target, student), lambda g: (None, None), "angle_huber")
    inv = 1.0 / count
    return _result(
        np.array(total * inv), (target, student), lambda g: (g * inv * g_t, g * inv * g_s), "angle_huber"
    )
