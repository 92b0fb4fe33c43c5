"""A small reverse-mode autodiff tape over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes its
gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Only the operations the UV losses need are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "_back", "requires_grad")
    __array_ufunc__ = None  # make numpy scalars defer to Tensor operators

    def __init__(self, data, parents=(), back=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self._back = back
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    # --- conveniences -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, retain_grads: bool = False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior gradients are released as soon as they are consumed unless
        ``retain_grads`` is set.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topo(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._back is not None and node.grad is not None:
                node._back(node.grad)
                if node.parents and not retain_grads:
                    node.grad = None

    # operator sugar
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

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only squaring is supported")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def const(data, like: Tensor | None = None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    if like is not None and np.isscalar(data):
        return Tensor(np.asarray(data, dtype=like.data.dtype))
    return Tensor(data)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, const(b, a)
    b = const(b)
    return const(a, b), b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _node(data, parents, back) -> Tensor:
    out = Tensor(data, parents)
    if out.requires_grad:
        out._back = back
    else:
        out.parents = ()
    return out


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.data - b.data, (a, b), back)


def neg(a) -> Tensor:
    def back(g):
        _acc(a, -g)

    return _node(-a.data, (a,), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        _acc(a, g / b.data)
        _acc(b, -g * out / b.data)

    return _node(out, (a, b), back)


def square(a) -> Tensor:
    def back(g):
        _acc(a, 2.0 * g * a.data)

    return _node(a.data * a.data, (a,), back)


def exp(a) -> Tensor:
    out = np.exp(a.data)

    def back(g):
        _acc(a, g * out)

    return _node(out, (a,), back)


def log(a) -> Tensor:
    def back(g):
        _acc(a, g / a.data)

    return _node(np.log(a.data), (a,), back)


def sqrt(a) -> Tensor:
    out = np.sqrt(a.data)

    def back(g):
        _acc(a, g * 0.5 / out)

    return _node(out, (a,), back)


def sigmoid(a) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def back(g):
        _acc(a, g * out * (1.0 - out))

    return _node(out, (a,), back)


def slope_factor(x: np.ndarray, slope: float) -> np.ndarray:
    """1 where ``x >= 0`` and ``slope`` elsewhere, in ``x``'s dtype."""
    d = (x < 0).astype(x.dtype)
    d *= x.dtype.type(slope - 1.0)
    d += x.dtype.type(1.0)
    return d


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    d = slope_factor(a.data, slope)

    def back(g):
        _acc(a, g * d)

    return _node(a.data * d, (a,), back)


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def hinge_sq(a) -> Tensor:
    """max(0, a)^2."""
    pos = np.maximum(a.data, 0)

    def back(g):
        _acc(a, 2.0 * g * pos)

    return _node(pos * pos, (a,), back)


def scale_by(a, s: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient to ``s``)."""
    return mul(a, Tensor(s))


# --- linear algebra / shape -------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back)


def linear(x, w, b) -> Tensor:
    """x @ w + b with a single fused backward."""

    def back(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _node(x.data @ w.data + b.data, (x, w, b), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat(xs, axis=-1) -> Tensor:
    xs = [const(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for x, gx in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, gx)

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def reshape(a, shape) -> Tensor:
    def back(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), back)


def getitem(a, idx) -> Tensor:
    """Basic slicing (views). Use :func:`gather` for integer row indexing."""

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _node(a.data[idx], (a,), back)


def gather(a, idx) -> Tensor:
    """Rows ``a[idx]`` for an integer index array of any shape; scatter-add backward."""
    idx = np.asarray(idx)

    def back(g):
        n = a.data.shape[0]
        flat_idx = idx.ravel()
        g2 = g.reshape(len(flat_idx), -1)
        out = np.empty((n, g2.shape[1]), dtype=g.dtype)
        for c in range(g2.shape[1]):
            out[:, c] = np.bincount(flat_idx, weights=g2[:, c], minlength=n)
        _acc(a, out.reshape(a.data.shape))

    return _node(a.data[idx], (a,), back)


def norm(a, axis=-1) -> Tensor:
    """Euclidean norm along ``axis`` with a zero subgradient at the origin."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        coef = np.where(out > 0, g / safe, 0.0)
        _acc(a, np.expand_dims(coef, axis) * a.data)

    return _node(out, (a,), back)


def dot(a, b, axis=-1) -> Tensor:
    return tsum(mul(a, b), axis=axis)


def amax(a, axis=None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    arg = np.argmax(a.data, axis=axis)
    out = np.max(a.data, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        if axis is None:
            full.flat[arg] = g
        else:
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        _acc(a, full)

    return _node(out, (a,), back)


def amin(a, axis=None) -> Tensor:
    return neg(amax(neg(a), axis))


def masked_logsumexp(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) over entries where ``mask`` is True (max-shifted).

    Rows with no valid entry return 0 and receive no gradient.
    """
    x = np.where(mask, a.data, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    empty = ~np.isfinite(m)
    m = np.where(empty, 0.0, m)
    e = np.where(mask, np.exp(x - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    s_safe = np.where(s > 0, s, 1.0)
    out = np.where(empty, 0.0, np.log(s_safe) + m)
    w = e / s_safe  # softmax weights

    def back(g):
        _acc(a, np.expand_dims(g, axis) * w)

    return _node(np.squeeze(out, axis=axis).astype(a.data.dtype), (a,), back)


def stop_gradient(a) -> Tensor:
    return Tensor(a.data)
