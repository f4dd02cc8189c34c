"""Reverse-mode automatic differentiation over dense float64 arrays of rank <= 2.

A :class:`Graph` is an append-only tape. Every :class:`Node` records the op
that produced it and its inputs; creation order is a valid topological order,
so :meth:`Graph.backward` simply walks the tape in reverse.

Typical lifecycle (one optimisation step)::

    g = Graph()
    w = g.param(np.ones((3, 1)))
    x = g.const(batch)
    loss = (x @ w).square().mean()
    grads = g.backward(loss)     # {w: dloss/dw}

Graphs are differentiated once and then discarded.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Sequence

import numpy as np

DOMAIN_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    __slots__ = ("graph", "value", "grad", "op", "inputs", "requires_grad", "attrs")
    # make `ndarray op Node` defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, graph, value, op, inputs=(), requires_grad=False, attrs=None):
        self.graph = graph
        self.value = value
        self.grad = None
        self.op = op
        self.inputs = tuple(inputs)
        self.requires_grad = requires_grad
        self.attrs = attrs or {}

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; python scalars become constants / scale ops
    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.graph.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.apply("mul", [self, other])
        if np.ndim(other) == 0:
            return self.graph.apply("scale", [self], factor=float(other))
        return self.graph.apply("mul", [self, self.graph.const(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.graph.apply("div", [self, other])
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return self.graph.apply("negate", [self])

    def __matmul__(self, other):
        return self.graph.apply("matmul", [self, self._lift(other)])

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        rows = key[0]
        cols = key[1] if len(key) > 1 else slice(None)
        return self.graph.apply("slice", [self], rows=rows, cols=cols)

    def tanh(self):
        return self.graph.apply("tanh", [self])

    def exp(self):
        return self.graph.apply("exp", [self])

    def log(self):
        return self.graph.apply("log", [self])

    def square(self):
        return self.graph.apply("square", [self])

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", [self], axis=axis, keepdims=keepdims)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


def _check_positive(op, x):
    if np.any(~(x > DOMAIN_EPS)):
        raise DomainError(f"{op}: input must be > {DOMAIN_EPS:g}, got min {np.min(x)!r}")


# Each op: (forward(values, attrs) -> array, backward(g, values, out, attrs) -> per-input grads)
_OPS: Dict[str, tuple] = {}


def _elementwise_binary(name, fwd, dfa, dfb):
    def forward(vals, attrs):
        _broadcast_shape(name, vals[0].shape, vals[1].shape)
        return fwd(vals[0], vals[1])

    def backward(g, vals, out, attrs):
        a, b = vals
        return [_unbroadcast(dfa(g, a, b, out), a.shape), _unbroadcast(dfb(g, a, b, out), b.shape)]

    _OPS[name] = (forward, backward)


_elementwise_binary("add", np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)
_elementwise_binary("sub", np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)
_elementwise_binary("mul", np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
# ties route the gradient to the first argument
_elementwise_binary(
    "max", np.maximum,
    lambda g, a, b, o: g * (a >= b), lambda g, a, b, o: g * (a < b),
)
_elementwise_binary(
    "min", np.minimum,
    lambda g, a, b, o: g * (a <= b), lambda g, a, b, o: g * (a > b),
)


def _div_forward(vals, attrs):
    _broadcast_shape("div", vals[0].shape, vals[1].shape)
    _check_positive("div", vals[1])
    return vals[0] / vals[1]


def _div_backward(g, vals, out, attrs):
    a, b = vals
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)]


_OPS["div"] = (_div_forward, _div_backward)


def _unary(name, fwd, dfn):
    _OPS[name] = (lambda vals, attrs: fwd(vals[0]), lambda g, vals, out, attrs: [dfn(g, vals[0], out)])


_unary("tanh", np.tanh, lambda g, x, o: g * (1.0 - o * o))
_unary("exp", np.exp, lambda g, x, o: g * o)
_unary("square", np.square, lambda g, x, o: 2.0 * g * x)
_unary("negate", np.negative, lambda g, x, o: -g)
_unary("sin", np.sin, lambda g, x, o: g * np.cos(x))
_unary("cos", np.cos, lambda g, x, o: -g * np.sin(x))


def _log_forward(vals, attrs):
    _check_positive("log", vals[0])
    return np.log(vals[0])


_OPS["log"] = (_log_forward, lambda g, vals, out, attrs: [g / vals[0]])
_OPS["scale"] = (
    lambda vals, attrs: vals[0] * attrs["factor"],
    lambda g, vals, out, attrs: [g * attrs["factor"]],
)


def _matmul_forward(vals, attrs):
    a, b = vals
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return a @ b


def _matmul_backward(g, vals, out, attrs):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return [g * b, g * a]
    if a.ndim == 1:
        return [b @ g, np.outer(a, g)]
    if b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g @ b.T, a.T @ g]


_OPS["matmul"] = (_matmul_forward, _matmul_backward)


def _reduce_backward(g, vals, out, attrs, scale=1.0):
    x = vals[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims"):
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g * scale, x.shape).copy()]


_OPS["sum"] = (
    lambda vals, attrs: np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    _reduce_backward,
)


def _mean_backward(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    n = x.size if axis is None else x.shape[axis]
    return _reduce_backward(g, vals, out, attrs, scale=1.0 / n)


_OPS["mean"] = (
    lambda vals, attrs: np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    _mean_backward,
)


def _concat_forward(vals, attrs):
    axis = attrs.get("axis", 0)
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in vals)
        raise ShapeError(f"concat: shapes {shapes} cannot be joined on axis {axis}") from None


def _concat_backward(g, vals, out, attrs):
    axis = attrs.get("axis", 0)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return np.split(g, splits, axis=axis)


_OPS["concat"] = (_concat_forward, _concat_backward)


def _slice_key(x, attrs):
    rows, cols = attrs["rows"], attrs["cols"]
    if x.ndim == 1:
        return rows
    # two index arrays would be numpy's pointwise indexing; take the sub-block instead
    if np.ndim(rows) == 1 and np.ndim(cols) == 1 and not isinstance(rows, slice) and not isinstance(cols, slice):
        return np.ix_(rows, cols)
    return (rows, cols)


def _slice_forward(vals, attrs):
    return vals[0][_slice_key(vals[0], attrs)]


def _slice_backward(g, vals, out, attrs):
    x = vals[0]
    dx = np.zeros_like(x)
    np.add.at(dx, _slice_key(x, attrs), g)
    return [dx]


_OPS["slice"] = (_slice_forward, _slice_backward)


def _reparam_forward(vals, attrs):
    mu, log_sigma = vals
    if mu.shape != log_sigma.shape or attrs["eps"].shape != mu.shape:
        raise ShapeError(
            f"reparam: mu {mu.shape}, log_sigma {log_sigma.shape}, epsilon {attrs['eps'].shape} must match"
        )
    return mu + attrs["eps"] * np.exp(log_sigma)


def _reparam_backward(g, vals, out, attrs):
    return [g, g * attrs["eps"] * np.exp(vals[1])]


_OPS["reparam"] = (_reparam_forward, _reparam_backward)

OP_TAGS = frozenset(_OPS)


def _as_array(value):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} arrays are not supported (max rank 2)")
    return arr


class Graph:
    """Append-only tape of nodes."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._done = False

    def _push(self, node):
        if self._done:
            raise RuntimeError("graph was already differentiated; build a new one")
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        """Leaf that receives gradients."""
        return self._push(Node(self, _as_array(value), "leaf", requires_grad=True))

    def const(self, value) -> Node:
        return self._push(Node(self, _as_array(value), "leaf", requires_grad=False))

    def apply(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        if op not in _OPS:
            raise ValueError(f"unknown op {op!r}")
        for x in inputs:
            if x.graph is not self:
                raise ValueError(f"{op}: input node belongs to a different graph")
        forward, _ = _OPS[op]
        value = forward([x.value for x in inputs], attrs)
        if value.ndim > 2:
            raise ShapeError(f"{op}: result rank {value.ndim} exceeds 2")
        requires_grad = any(x.requires_grad for x in inputs)
        return self._push(Node(self, value, op, inputs, requires_grad, attrs))

    def backward(self, loss: Node) -> Dict[Node, np.ndarray]:
        """Accumulate adjoints from ``loss`` back to every reachable node.

        Returns a map from each differentiable leaf reachable from ``loss``
        to its gradient.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        self._done = True
        loss.grad = np.ones_like(loss.value)
        leaves = {}
        for node in reversed(self.nodes):
            if node.grad is None or not node.requires_grad:
                continue
            if node.op == "leaf":
                leaves[node] = node.grad
                continue
            _, backward = _OPS[node.op]
            grads = backward(node.grad, [x.value for x in node.inputs], node.value, node.attrs)
            for x, gx in zip(node.inputs, grads):
                if not x.requires_grad:
                    continue
                if x.grad is None:
                    x.grad = np.array(gx, dtype=np.float64).reshape(x.value.shape)
                else:
                    x.grad = x.grad + gx
        return leaves


def apply(op_tag: str, inputs: Sequence[Node], **attrs) -> Node:
    if not inputs:
        raise ValueError(f"{op_tag}: needs at least one input node")
    return inputs[0].graph.apply(op_tag, inputs, **attrs)


def backward(loss: Node) -> Dict[Node, np.ndarray]:
    return loss.graph.backward(loss)


def detach(node: Node) -> Node:
    """Same value, cut from the tape."""
    return node.graph.const(node.value)


def reparam_sample(mu: Node, log_sigma: Node, epsilon) -> Node:
    """``mu + epsilon * exp(log_sigma)``; ``epsilon`` is a constant."""
    eps = np.asarray(epsilon, dtype=np.float64)
    return mu.graph.apply("reparam", [mu, log_sigma], eps=eps)


def concat(nodes: Sequence[Node], axis=0) -> Node:
    return apply("concat", list(nodes), axis=axis)


def minimum(a: Node, b: Node) -> Node:
    return apply("min", [a, b])


def maximum(a: Node, b: Node) -> Node:
    return apply("max", [a, b])


def sin(x: Node) -> Node:
    return x.graph.apply("sin", [x])


def cos(x: Node) -> Node:
    return x.graph.apply("cos", [x])


def smooth_clamp(x: Node, lo: float, hi: float) -> Node:
    """Map ``x`` into ``(lo, hi)`` with a rescaled tanh."""
    half = 0.5 * (hi - lo)
    return x.tanh() * half + (lo + half)


def smooth_clamp_np(x, lo, hi):
    half = 0.5 * (hi - lo)
    return np.tanh(x) * half + (lo + half)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


LOG_2PI = math.log(2.0 * math.pi)
