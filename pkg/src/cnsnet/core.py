"""Dense tensors, a recording tape and reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient.  :func:`backward` then replays the
recorded adjoints in reverse order.  Outside a tape, or with constant inputs,
the same functions are plain numpy evaluations.

Parameters and activations are float32 by default; every reduction
accumulates in float64.  All operations preserve the floating dtype of their
inputs, so a float64 graph can be built for finite-difference checks.
"""

import math
import threading

import numpy as np

from . import kernels
from .errors import ContractViolation, InvalidInputError

LOG_EPS = 1e-8

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """An n-dimensional real array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None, check=True):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if check and not np.all(np.isfinite(arr)):
            raise InvalidInputError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, check=False)


def value(x):
    """The raw array behind a tensor (or the argument itself)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


class _Record:
    __slots__ = ("inputs", "output", "adjoint")

    def __init__(self, inputs, output, adjoint):
        self.inputs = inputs
        self.output = output
        self.adjoint = adjoint


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations performed inside the ``with`` block
    on gradient-requiring tensors are appended to :attr:`records`.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractViolation("tape exited out of order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def _emit(out_data, inputs, adjoint):
    """Wrap an op result and record it if any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, check=False)
    if needs:
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(_Record(inputs, out, adjoint))
    return out


def backward(tape, loss, wrt=None):
    """Gradients of a scalar ``loss`` by replaying ``tape`` in reverse.

    Returns a list aligned with ``wrt`` when given (zeros for tensors the loss
    does not depend on); otherwise a dict mapping every gradient-requiring
    leaf reached to its gradient.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractViolation("backward needs a scalar loss tensor")
    adj = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for rec in reversed(tape.records):
        produced.add(id(rec.output))
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.adjoint(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    if wrt is not None:
        out = []
        for t in wrt:
            g = adj.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False))
        return out
    leaves = {}
    seen = set()
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and id(inp) not in produced and id(inp) not in seen:
                seen.add(id(inp))
                g = adj.get(id(inp))
                leaves[inp] = np.zeros_like(inp.data) if g is None else g
    return leaves


# ---------------------------------------------------------------------------
# primitives

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    """Coerce two operands to tensors; constants adopt the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype), check=False)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype), check=False), b
    return as_tensor(a), as_tensor(b)


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None,
                            _unbroadcast(g * ad, bd.shape) if rb else None))


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _emit(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _emit(out, (a,), adjoint)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _emit(out, (a,), lambda g: (g * (out > 0),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1 - t * t),))


def _sigmoid_array(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid_array(a.data)
    return _emit(s, (a,), lambda g: (g * s * (1 - s),))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi).astype(a.dtype), (a,), lambda g: (g * inside,))


def log(a, eps=LOG_EPS):
    """Natural log with the argument clamped to ``[eps, 1]``."""
    a = as_tensor(a)
    c = np.clip(a.data, eps, 1.0)
    inside = (a.data >= eps) & (a.data <= 1.0)
    return _emit(np.log(c), (a,), lambda g: (np.where(inside, g / c, 0).astype(a.dtype),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax_rows(a):
    a = as_tensor(a)
    p = kernels.softmax_rows(a.data)

    def adjoint(g):
        dot = np.sum(g * p, axis=1, keepdims=True, dtype=np.float64)
        return ((p * (g - dot)).astype(a.dtype),)

    return _emit(p, (a,), adjoint)


def l2norm_rows(a):
    """Euclidean norm of each row; the gradient at a zero row is taken as 0."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data.astype(np.float64) ** 2, axis=-1))
    safe = np.where(norm > 0, norm, 1.0)

    def adjoint(g):
        scale_ = np.where(norm > 0, g / safe, 0.0)
        return ((a.data * scale_[..., None]).astype(a.dtype),)

    return _emit(norm.astype(a.dtype), (a,), adjoint)


def conv2d(x, w, b, stride=1, pad=1):
    """2-D cross-correlation over NCHW input with an (F, C, kh, kw) filter bank."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise InvalidInputError(f"conv2d expects {c2} input channels, got {c}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + b.data).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def adjoint(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g2.sum(axis=0) if b.requires_grad else None
        dx = kernels.col2im(g2 @ wmat, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        return dx, dw, db

    return _emit(np.ascontiguousarray(out), (x, w, b), adjoint)


def maxpool2d(x, k=2, stride=2):
    x = as_tensor(x)
    out, arg = kernels.maxpool_forward(x.data, k, stride)
    shape = x.shape
    return _emit(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, shape),))


# ---------------------------------------------------------------------------
# probability-level building blocks

def _as_rows(x):
    x = as_tensor(x)
    if x.data.ndim == 1:
        return reshape(x, (1, -1)), True
    if x.data.ndim != 2:
        raise InvalidInputError("expected a vector or a (batch, k) matrix")
    return x, False


def _finish(rows_value, single):
    return reshape(rows_value, ()) if single else rows_value


def softmax(logits):
    """Row-wise softmax of a vector or (batch, k) matrix of logits."""
    rows, single = _as_rows(logits)
    if not np.all(np.isfinite(rows.data)):
        raise InvalidInputError("softmax input must be finite")
    p = softmax_rows(rows)
    return reshape(p, (-1,)) if single else p


def _check_probs(p):
    d = p.data
    if np.any(d < -1e-6) or np.any(d > 1 + 1e-6) or not np.all(np.isfinite(d)):
        raise InvalidInputError("probabilities must lie in [0, 1]")


def cross_entropy(pred, target_onehot):
    """``-sum_j y_j log(clamp(p_j))`` per row; scalar for vector input."""
    rows, single = _as_rows(pred)
    y = np.asarray(value(target_onehot))
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != rows.shape:
        raise InvalidInputError(f"target shape {y.shape} does not match predictions {rows.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise InvalidInputError("target must be one-hot")
    _check_probs(rows)
    return _finish(neg(sum(mul(log(rows), y.astype(rows.dtype)), axis=1)), single)


def kl_to_uniform(pred):
    """``KL(U || pred)`` per row, uniform distribution as the first argument."""
    rows, single = _as_rows(pred)
    k = rows.shape[1]
    if k < 2:
        raise InvalidInputError("KL to uniform needs at least two classes")
    _check_probs(rows)
    # sum_j (1/k) log((1/k) / p_j) = -log k - mean_j log p_j
    return _finish(sub(-math.log(k), mean(log(rows), axis=1)), single)


def masked_l2(pred, mask):
    """``|| mask * pred ||_2`` per row."""
    rows, single = _as_rows(pred)
    m = np.asarray(value(mask))
    if m.ndim != 1 or m.shape[0] != rows.shape[1]:
        raise InvalidInputError(f"mask length {m.shape} does not match {rows.shape[1]} classes")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInputError("mask entries must be 0 or 1")
    return _finish(l2norm_rows(mul(rows, m.astype(rows.dtype))), single)
