"""A small reverse-mode autodiff engine over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
construction order; :func:`backprop` walks the tape backwards.  Outside a
tape every op is a plain numpy computation, which is what evaluation and
verification use.

Values are float32 by default.  :func:`precision` switches the dtype of newly
created tensors, which :func:`grad_check` uses for its finite-difference side.
"""

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from . import kernels

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    old = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "stop", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.stop = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of the ops executed inside its ``with`` block."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)

    def gradient(self, root, sources):
        grads = backprop(self, root)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == default_dtype() else data.astype(default_dtype())
    out.parents = ()
    out.backward_fn = None
    out.stop = False
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backprop(tape, root):
    """Reverse-mode gradients of scalar ``root`` for every leaf on ``tape``.

    Returns a dict keyed by leaf tensor (identity).  Leaves that are only
    reachable through a stop-gradient node get an all-zero gradient.
    """
    if root.data.size != 1:
        raise ValueError(f"backprop root must be scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad and p.backward_fn is None and not p.parents:
                leaves[id(p)] = p
    if root.requires_grad and root.backward_fn is None:
        leaves[id(root)] = root
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.stop:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {leaf: grads.get(key, np.zeros_like(leaf.data)) for key, leaf in leaves.items()}


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = as_tensor(a)
    return _node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, W, b):
    """x @ W.T + b for x of shape (N, in)."""
    return _node(x.data @ W.data.T + b.data, (x, W, b),
                 lambda g: (g @ W.data, g.T @ x.data, g.sum(axis=0)))


def absolute(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2 * out),))


def clip(a, lo, hi):
    """Elementwise clamp to [lo, hi] (constant arrays); zero grad where clamped."""
    out = np.minimum(np.maximum(a.data, lo), hi)
    inside = (a.data > lo) & (a.data < hi)
    return _node(out, (a,), lambda g: (g * inside,))


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                            _unbroadcast(np.where(cond, 0, g), b.shape)))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.asarray(a.data[idx]), (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stop_gradient(a):
    """Identity in the forward pass; propagates nothing to ``a``."""
    a = as_tensor(a)
    out = _node(a.data, (a,), lambda g: (None,))
    out.stop = True
    return out


def conv2d(x, W, b, stride=1, pad=0):
    """Cross-correlation of x (N,C,H,W) with W (O,C,k,k), zero padding."""
    n, c, h, w = x.shape
    o, _, kh, kw = W.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad)
    wf = W.data.reshape(o, -1)
    out = np.matmul(wf, cols) + b.data[None, :, None]

    def back(g):
        g = g.reshape(n, o, oh * ow)
        dW = np.einsum("nop,nkp->ok", g, cols).reshape(W.shape)
        dcols = np.matmul(wf.T, g)
        dx = kernels.col2im(np.ascontiguousarray(dcols), x.shape, kh, kw, stride, pad)
        return dx, dW, g.sum(axis=(0, 2))

    return _node(out.reshape(n, o, oh, ow), (x, W, b), back)


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label]; max-subtracted for stability."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    n = z.shape[0]
    loss = (logsum - shifted[np.arange(n), labels]).mean()

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return (g * p / n,)

    return _node(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    location: tuple = None
    reason: str = ""


def grad_check(fn, point, step=1e-3, tolerance=1e-4):
    """Compare backprop gradients of scalar ``fn`` against central differences.

    ``point`` is an array or a sequence of arrays, one per argument of ``fn``.
    The analytic side runs at the default precision; differences are taken in
    float64.  Relative error is ``|a - n| / max(|a|, |n|, 1e-2)``.  A point
    where the one-sided slopes disagree is reported as non-differentiable.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    points = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]

    with Tape() as tape:
        leaves = [Tensor(p, requires_grad=True) for p in points]
        out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(np.inf, False, (), "non-finite value at point")
    grads = backprop(tape, out)
    analytic = [grads.get(leaf, np.zeros(leaf.shape)).astype(np.float64) for leaf in leaves]

    def f(args):
        with precision(np.float64):
            return float(fn(*[Tensor(a) for a in args]).data)

    f0 = f(points)
    worst = 0.0
    where_ = None
    for ai, p in enumerate(points):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in points]
            minus = [q.copy() for q in points]
            plus[ai][idx] += step
            minus[ai][idx] -= step
            fp, fm = f(plus), f(minus)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(np.inf, False, (ai, idx), "non-finite value near point")
            fwd = (fp - f0) / step
            bwd = (f0 - fm) / step
            if abs(fwd - bwd) > 0.1 * max(1.0, abs(fwd), abs(bwd)):
                return GradCheckReport(np.inf, False, (ai, idx), "non-differentiable point")
            num = (fp - fm) / (2 * step)
            a = analytic[ai][idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-2)
            if err >= worst:
                worst, where_ = err, (ai, idx)
    return GradCheckReport(worst, worst <= tolerance, where_,
                           "" if worst <= tolerance else "gradient mismatch")
