"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-free engine in the micrograd style: each operation returns a
:class:`Tensor` holding a numpy array plus a closure that distributes the
output gradient to the operation's inputs. ``backward`` walks the graph
once in reverse topological order, so gradients accumulate additively
across fan-out.

Only the operations the driver model actually needs are provided,
including the hard spike nonlinearity whose backward pass uses a
sigmoid-derivative surrogate. Everything is float64; tensors built from
plain numbers or arrays are constants and stay outside the graph.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateMaskError, ShapeError

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateMaskError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "affine",
    "tanh",
    "sigmoid",
    "exp",
    "softplus",
    "mish",
    "absolute",
    "spike",
    "concat",
    "stack",
    "reshape",
    "take",
    "gather_rows",
    "tsum",
    "masked_mae",
    "backward",
    "reset_grads",
    "make_node",
    "deposit",
]


class Tensor:
    """A node in the differentiation graph.

    ``value`` is a float64 array, ``grad`` is ``None`` until a backward
    pass reaches the node (``None`` means zero). Constants have
    ``requires_grad=False`` and never appear as parents, so backward
    never visits them.
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's value array."""
        t = Tensor.__new__(Tensor)
        t.value = self.value
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; constants are lifted automatically.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    # First accumulation copies: g may alias a buffer shared with siblings.
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(value: np.ndarray, parents: Iterable[Tensor]) -> tuple[Tensor, tuple[Tensor, ...]]:
    """Create an op output; returns the node and its grad-requiring parents."""
    out = Tensor(value)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
    return out, live


def make_node(value: np.ndarray, parents: Iterable[Tensor]) -> tuple[Tensor, tuple[Tensor, ...]]:
    """Extension point for fused operations defined outside this module.

    Returns ``(out, live)``; when ``live`` is non-empty the caller must
    attach a closure to ``out._backward`` that deposits a gradient into
    *every* parent with ``requires_grad`` (the backward pass relies on
    each visited node receiving at least one deposit).
    """
    return _node(value, parents)


def deposit(tensor: Tensor, grad: np.ndarray) -> None:
    """Accumulate a gradient contribution inside a fused backward closure."""
    _acc(tensor, grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting)
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out, live = _node(a.value + b.value, (a, b))
    if live:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.value.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g, b.value.shape))
        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out, live = _node(a.value - b.value, (a, b))
    if live:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g, a.value.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g, b.value.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out, live = _node(a.value * b.value, (a, b))
    if live:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g * b.value, a.value.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(g * a.value, b.value.shape))
        out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out, live = _node(a.value / b.value, (a, b))
    if live:
        def _bw():
            g = out.grad
            if a.requires_grad:
                _acc(a, _unbroadcast(g / b.value, a.value.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(-g * out.value / b.value, b.value.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out, live = _node(-a.value, (a,))
    if live:
        def _bw():
            _acc(a, -out.grad)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def affine(weight: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """``W x + b`` for a vector ``x``; rows of a 2-D ``x`` are independent samples.

    weight: [n, m], bias: [n], x: [m] or [N, m] -> [n] or [N, n].
    """
    w, bv, xv = weight.value, bias.value, x.value
    if w.ndim != 2 or bv.shape != (w.shape[0],) or xv.shape[-1] != w.shape[1] or xv.ndim > 2:
        raise ShapeError(
            f"affine shapes do not conform: weight {w.shape}, bias {bv.shape}, input {xv.shape}"
        )
    if xv.ndim == 1:
        value = w @ xv + bv
    else:
        value = xv @ w.T + bv
    out, live = _node(value, (weight, bias, x))
    if live:
        def _bw():
            g = out.grad
            if xv.ndim == 1:
                if weight.requires_grad:
                    _acc(weight, np.outer(g, xv))
                if bias.requires_grad:
                    _acc(bias, g)
                if x.requires_grad:
                    _acc(x, w.T @ g)
            else:
                if weight.requires_grad:
                    _acc(weight, g.T @ xv)
                if bias.requires_grad:
                    _acc(bias, g.sum(axis=0))
                if x.requires_grad:
                    _acc(x, g @ w)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus_arr(x: np.ndarray) -> np.ndarray:
    # ln(1+e^x) = x + ln(1+e^-x) for large x; both branches on clipped args.
    return np.where(
        x > 20.0,
        x + np.log1p(np.exp(-np.maximum(x, 20.0))),
        np.log1p(np.exp(np.minimum(x, 20.0))),
    )


# Value-level overflow-safe helpers, shared with fused kernels elsewhere.
sigmoid_array = _sigmoid_arr
softplus_array = _softplus_arr


def tanh(x: Tensor) -> Tensor:
    out, live = _node(np.tanh(x.value), (x,))
    if live:
        def _bw():
            _acc(x, out.grad * (1.0 - out.value * out.value))
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    out, live = _node(_sigmoid_arr(x.value), (x,))
    if live:
        def _bw():
            _acc(x, out.grad * out.value * (1.0 - out.value))
        out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    out, live = _node(np.exp(x.value), (x,))
    if live:
        def _bw():
            _acc(x, out.grad * out.value)
        out._backward = _bw
    return out


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), overflow-safe; derivative is the logistic function."""
    out, live = _node(_softplus_arr(x.value), (x,))
    if live:
        def _bw():
            _acc(x, out.grad * _sigmoid_arr(x.value))
        out._backward = _bw
    return out


def mish(x: Tensor) -> Tensor:
    """x * tanh(ln(1+e^x)); smooth, keeps a small nonzero slope below zero."""
    xv = x.value
    t = np.tanh(_softplus_arr(xv))
    out, live = _node(xv * t, (x,))
    if live:
        def _bw():
            _acc(x, out.grad * (t + xv * (1.0 - t * t) * _sigmoid_arr(xv)))
        out._backward = _bw
    return out


def absolute(x: Tensor) -> Tensor:
    """|x| with the subgradient at zero taken as 0."""
    out, live = _node(np.abs(x.value), (x,))
    if live:
        def _bw():
            _acc(x, out.grad * np.sign(x.value))
        out._backward = _bw
    return out


def spike(v: Tensor, threshold: float, sharpness: float) -> Tensor:
    """Hard threshold: 1 where ``v >= threshold``, else 0.

    The forward pass is a step function; the backward pass substitutes
    the sigmoid-derivative surrogate
    ``sharpness * s * (1 - s)`` with ``s = sigmoid(sharpness * (v - threshold))``,
    so gradient-based training can see through the discontinuity.
    """
    if threshold <= 0.0:
        raise ValueError(f"spike threshold must be positive, got {threshold}")
    if sharpness <= 0.0:
        raise ValueError(f"surrogate sharpness must be positive, got {sharpness}")
    value = np.where(v.value >= threshold, 1.0, 0.0)
    out, live = _node(value, (v,))
    if live:
        def _bw():
            s = _sigmoid_arr(sharpness * (v.value - threshold))
            _acc(v, out.grad * sharpness * s * (1.0 - s))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(
            f"concat shapes do not conform along axis {axis}: "
            f"{[p.value.shape for p in parts]}"
        ) from e
    out, live = _node(value, parts)
    if live:
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def _bw():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    _acc(p, g[tuple(sl)])
        out._backward = _bw
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    value = np.stack([p.value for p in parts], axis=axis)
    out, live = _node(value, parts)
    if live:
        def _bw():
            slabs = np.moveaxis(out.grad, axis, 0)
            for p, g in zip(parts, slabs):
                if p.requires_grad:
                    _acc(p, g)
        out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out, live = _node(x.value.reshape(shape), (x,))
    if live:
        def _bw():
            _acc(x, out.grad.reshape(x.value.shape))
        out._backward = _bw
    return out


def take(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; backward scatter-adds into place."""
    out, live = _node(x.value[key], (x,))
    if live:
        def _bw():
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            np.add.at(x.grad, key, out.grad)
        out._backward = _bw
    return out


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out, live = _node(table.value[idx], (table,))
    if live:
        def _bw():
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, out.grad)
        out._backward = _bw
    return out


def tsum(x: Tensor, axis=None) -> Tensor:
    out, live = _node(x.value.sum(axis=axis), (x,))
    if live:
        def _bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            _acc(x, np.broadcast_to(g, x.value.shape))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def masked_mae(pred: Tensor, obs: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over entries where ``mask`` is 1.

    The sum runs over the selected entries only, so appending masked-out
    entries leaves the result bit-identical. The subgradient of ``|.|``
    at 0 is taken as 0.
    """
    obs = np.asarray(obs, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.value.shape != obs.shape or pred.value.shape != mask.shape:
        raise ShapeError(
            f"masked_mae shapes do not conform: pred {pred.value.shape}, "
            f"obs {obs.shape}, mask {mask.shape}"
        )
    count = mask.sum()
    if count == 0.0:
        raise DegenerateMaskError("masked_mae needs at least one unmasked entry")
    diff = pred.value - obs
    valid = mask != 0.0
    value = np.abs(diff[valid]).sum() / count
    out, live = _node(value, (pred,))
    if live:
        def _bw():
            _acc(pred, out.grad * mask * np.sign(diff) / count)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Propagate gradients from a scalar ``root`` to every reachable tensor.

    Iterative topological sort (graphs here are thousands of nodes deep,
    far past the recursion limit). Each node's closure runs exactly once,
    after all its consumers have deposited their contributions.
    """
    if root.value.size != 1:
        raise ValueError(
            f"backward requires a scalar root, got shape {root.value.shape}"
        )
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack_.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def reset_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
