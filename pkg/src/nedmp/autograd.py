"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations needed by the models are provided. Each operation builds a
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients; :func:`backward` walks that graph in reverse
topological order and accumulates into leaf tensors.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .dmp import _exclusive_prefix_suffix, leave_one_out

__all__ = [
    "Tensor",
    "constant",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "concat",
    "take",
    "column",
    "stack_columns",
    "stack",
    "getitem",
    "reshape",
    "spmm",
    "sum",
    "clip",
    "minimum",
    "relu_sum",
    "gru_cell",
    "node_prod",
    "cavity_prod",
]

_state = {"enabled": True}


@contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    prev = _state["enabled"]
    _state["enabled"] = False
    try:
        yield
    finally:
        _state["enabled"] = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(value, parents, backward_fn) -> Tensor:
    if _state["enabled"] and any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise RuntimeError("backward() needs a loss produced by a recorded forward pass")
    if loss.value.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order, seen, stack = [], set(), [(loss, False)]
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
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor is active."""
    v = np.maximum(x.value, floor) if floor > 0 else x.value
    inside = x.value >= floor if floor > 0 else np.ones(x.shape, dtype=bool)
    return _make(np.log(v), (x,), lambda g: (np.where(inside, g / v, 0.0),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``. NaN propagates."""
    a, b = constant(a), constant(b)
    take_a = a.value <= b.value
    return _make(
        np.minimum(a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def relu_sum(x: Tensor) -> Tensor:
    """Scalar ``sum(max(x, 0))``."""
    mask = x.value > 0
    return _make(np.sum(x.value * mask), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _make(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for a batch ``x`` of shape (N, in)."""

    def bw(g):
        return g @ W.value.T, x.value.T @ g, g.sum(axis=0)

    return _make(x.value @ W.value + b.value, (x, W, b), bw)


def spmm(A: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times tensor."""
    At = A.T.tocsr()
    return _make(A @ x.value, (x,), lambda g: (At @ g,))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [constant(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def take(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]`` (repeated indices allowed)."""
    idx = np.asarray(idx)

    def bw(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), bw)


def column(x: Tensor, k: int) -> Tensor:
    """Column ``k`` of a 2-d tensor as a 1-d tensor."""

    def bw(g):
        out = np.zeros_like(x.value)
        out[:, k] = g
        return (out,)

    return _make(x.value[:, k], (x,), bw)


def stack_columns(cols) -> Tensor:
    """Stack 1-d tensors of equal length into a (len, k) tensor."""
    cols = [constant(c) for c in cols]
    return _make(
        np.stack([c.value for c in cols], axis=1),
        tuple(cols),
        lambda g: tuple(g[:, k] for k in range(len(cols))),
    )


def stack(parts, axis: int = 0) -> Tensor:
    parts = [constant(p) for p in parts]
    return _make(
        np.stack([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing."""

    def bw(g):
        out = np.zeros_like(x.value)
        out[key] = g
        return (out,)

    return _make(x.value[key], (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# fused recurrent cell


def gru_cell(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """Gated recurrent unit.

    ``W`` (in, 3D), ``U`` (D, 3D) and ``b`` (3D,) hold the update gate, reset
    gate and candidate blocks in that order::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        c = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * h + z * c
    """
    D = h.shape[-1]
    xw = x.value @ W.value + b.value
    hu = h.value @ U.value[:, : 2 * D]
    z = _sigmoid(xw[:, :D] + hu[:, :D])
    r = _sigmoid(xw[:, D : 2 * D] + hu[:, D:])
    rh = r * h.value
    c = np.tanh(xw[:, 2 * D :] + rh @ U.value[:, 2 * D :])
    out = (1 - z) * h.value + z * c

    def bw(g):
        Uz, Ur, Uh = U.value[:, :D], U.value[:, D : 2 * D], U.value[:, 2 * D :]
        dz = g * (c - h.value) * z * (1 - z)
        dc = g * z * (1 - c * c)
        drh = dc @ Uh.T
        dr = drh * h.value * r * (1 - r)
        dh = g * (1 - z) + drh * r + dz @ Uz.T + dr @ Ur.T
        da = np.concatenate([dz, dr, dc], axis=1)
        dx = da @ W.value.T
        dW = x.value.T @ da
        dU = np.concatenate([h.value.T @ dz, h.value.T @ dr, rh.T @ dc], axis=1)
        return dx, dh, dW, dU, da.sum(axis=0)

    return _make(out, (x, h, W, U, b), bw)


# ---------------------------------------------------------------------------
# message products over incoming edges


def _pairwise_exclusion(P: np.ndarray) -> np.ndarray:
    """``Q[n, m, l] = prod_{k not in {m, l}} P[n, k]`` for ``m != l``; diagonal zeroed."""
    d = P.shape[1]
    X = np.repeat(P[:, None, :], d, axis=1)
    idx = np.arange(d)
    X[:, idx, idx] = 1.0
    Q = leave_one_out(X)
    Q[:, idx, idx] = 0.0
    return Q


def _scatter_padded(grad_P: np.ndarray, plan, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[plan.slots[plan.mask]] = grad_P[plan.mask]
    return out


def node_prod(theta: Tensor, plan) -> Tensor:
    """Per-node product of incoming edge values."""
    P = plan.padded(theta.value)
    pre, suf = _exclusive_prefix_suffix(P)
    full = pre[:, -1] * P[:, -1]

    def bw(g):
        return (_scatter_padded(g[:, None] * pre * suf, plan, theta.shape[0]),)

    return _make(full, (theta,), bw)


def cavity_prod(theta: Tensor, plan) -> Tensor:
    """Per-edge ``j -> i`` product of values on edges ``k -> j`` with ``k != i``."""
    P = plan.padded(theta.value)
    loo = leave_one_out(P)
    full = loo[:, -1] * P[:, -1]
    j = plan.cavity_node
    has_rev = plan.cavity_slot >= 0
    slot = np.maximum(plan.cavity_slot, 0)
    out = np.where(has_rev, loo[j, slot], full[j])

    def bw(g):
        G = np.zeros(P.shape)
        np.add.at(G, (j[has_rev], slot[has_rev]), g[has_rev])
        g_full = np.bincount(j[~has_rev], weights=g[~has_rev], minlength=P.shape[0])
        grad_P = np.einsum("nm,nml->nl", G, _pairwise_exclusion(P)) + g_full[:, None] * loo
        return (_scatter_padded(grad_P, plan, theta.shape[0]),)

    return _make(out, (theta,), bw)
