"""Reverse-mode automatic differentiation on dense float64 arrays.

Graphs are built eagerly: every operation computes its forward value at
construction time and records a backward closure. ``backpropagate`` walks
the graph once in reverse topological order, accumulating gradients
additively so that fan-out (a node consumed by several operations) is
handled by plain ``+=``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, NonScalarRootError, ShapeMismatchError

# Dense array type used throughout the package: float64, row-major.
Tensor = np.ndarray

__all__ = [
    "GraphNode",
    "Tensor",
    "backpropagate",
    "concat_rows",
    "constant",
    "detach",
    "dropout",
    "evaluate_graph",
    "exp",
    "layer_norm",
    "log_add_exp",
    "log_softmax",
    "masked_attention",
    "matmul",
    "parameter",
    "relu",
    "reshape",
    "sigmoid",
    "slice_cols",
    "slice_rows",
    "sum_all",
    "take_rows",
    "tanh",
    "topological_order",
    "zero_gradients",
]


def _as_array(value) -> Tensor:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class GraphNode:
    """One node of the computation graph: a value, a gradient, and the
    backward rule of the operation that produced it."""

    __slots__ = ("value", "grad", "op", "name", "_parents", "_backward")

    def __init__(self, value, parents: tuple = (), op: str = "leaf", name: str = ""):
        self.value: Tensor = _as_array(value)
        self.grad: Tensor = np.zeros_like(self.value)
        self.op = op
        self.name = name
        self._parents: tuple[GraphNode, ...] = parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"GraphNode({label}, shape={self.value.shape})"

    # Arithmetic sugar. Scalars are promoted to constants.
    def __add__(self, other) -> "GraphNode":
        return add(self, _wrap(other))

    def __radd__(self, other) -> "GraphNode":
        return add(_wrap(other), self)

    def __sub__(self, other) -> "GraphNode":
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other) -> "GraphNode":
        return add(_wrap(other), scale(self, -1.0))

    def __neg__(self) -> "GraphNode":
        return scale(self, -1.0)

    def __mul__(self, other) -> "GraphNode":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _wrap(other))

    def __rmul__(self, other) -> "GraphNode":
        return self.__mul__(other)


def _wrap(value) -> GraphNode:
    return value if isinstance(value, GraphNode) else GraphNode(value, op="const")


def parameter(value, name: str) -> GraphNode:
    """A named leaf intended to persist across training steps."""
    return GraphNode(value, op="param", name=name)


def constant(value, name: str = "") -> GraphNode:
    return GraphNode(value, op="const", name=name)


def detach(node: GraphNode) -> GraphNode:
    """Copy a node's value into a fresh leaf; gradients stop here."""
    return GraphNode(node.value.copy(), op="detach", name=node.name)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: GraphNode, b: GraphNode, op: str) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.value.shape} and {b.value.shape} do not broadcast"
        ) from None


def add(a: GraphNode, b: GraphNode) -> GraphNode:
    _check_broadcast(a, b, "add")
    out = GraphNode(a.value + b.value, (a, b), op="add")

    def _backward():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = _backward
    return out


def multiply(a: GraphNode, b: GraphNode) -> GraphNode:
    _check_broadcast(a, b, "multiply")
    out = GraphNode(a.value * b.value, (a, b), op="mul")

    def _backward():
        a.grad += _unbroadcast(out.grad * b.value, a.value.shape)
        b.grad += _unbroadcast(out.grad * a.value, b.value.shape)

    out._backward = _backward
    return out


def scale(a: GraphNode, k: float) -> GraphNode:
    out = GraphNode(a.value * k, (a,), op="scale")

    def _backward():
        a.grad += out.grad * k

    out._backward = _backward
    return out


def matmul(x: GraphNode, w: GraphNode) -> GraphNode:
    """``x @ w`` with ``w`` a matrix; ``x`` may carry leading batch axes."""
    if w.value.ndim != 2:
        raise ShapeMismatchError(f"matmul: weight must be 2-d, got {w.value.shape}")
    if x.value.ndim < 1 or x.value.shape[-1] != w.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul: shapes {x.value.shape} and {w.value.shape} do not align"
        )
    out = GraphNode(x.value @ w.value, (x, w), op="matmul")

    def _backward():
        g = out.grad
        x.grad += g @ w.value.T
        k, n = w.value.shape
        x_flat = x.value.reshape(-1, k)
        g_flat = g.reshape(-1, n)
        w.grad += x_flat.T @ g_flat

    out._backward = _backward
    return out


def relu(x: GraphNode) -> GraphNode:
    out = GraphNode(np.maximum(x.value, 0.0), (x,), op="relu")

    def _backward():
        x.grad += out.grad * (out.value > 0.0)

    out._backward = _backward
    return out


def _sigmoid_values(x: Tensor) -> Tensor:
    # Split by sign so the exponential never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: GraphNode) -> GraphNode:
    out = GraphNode(_sigmoid_values(x.value), (x,), op="sigmoid")

    def _backward():
        x.grad += out.grad * out.value * (1.0 - out.value)

    out._backward = _backward
    return out


def tanh(x: GraphNode) -> GraphNode:
    out = GraphNode(np.tanh(x.value), (x,), op="tanh")

    def _backward():
        x.grad += out.grad * (1.0 - out.value * out.value)

    out._backward = _backward
    return out


def exp(x: GraphNode) -> GraphNode:
    out = GraphNode(np.exp(x.value), (x,), op="exp")

    def _backward():
        x.grad += out.grad * out.value

    out._backward = _backward
    return out


def sum_all(x: GraphNode) -> GraphNode:
    out = GraphNode(np.sum(x.value), (x,), op="sum")

    def _backward():
        x.grad += out.grad

    out._backward = _backward
    return out


def reshape(x: GraphNode, shape: Sequence[int]) -> GraphNode:
    out = GraphNode(x.value.reshape(shape), (x,), op="reshape")

    def _backward():
        x.grad += out.grad.reshape(x.value.shape)

    out._backward = _backward
    return out


def take_rows(x: GraphNode, indices) -> GraphNode:
    """Gather rows along axis 0; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = GraphNode(x.value[idx], (x,), op="take_rows")

    def _backward():
        np.add.at(x.grad, idx, out.grad)

    out._backward = _backward
    return out


def concat_rows(nodes: Sequence[GraphNode]) -> GraphNode:
    parts = [n.value for n in nodes]
    out = GraphNode(np.concatenate(parts, axis=0), tuple(nodes), op="concat_rows")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def _backward():
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            node.grad += out.grad[start:stop]

    out._backward = _backward
    return out


def slice_rows(x: GraphNode, start: int, stop: int) -> GraphNode:
    out = GraphNode(x.value[start:stop].copy(), (x,), op="slice_rows")

    def _backward():
        x.grad[start:stop] += out.grad

    out._backward = _backward
    return out


def slice_cols(x: GraphNode, start: int, stop: int) -> GraphNode:
    out = GraphNode(x.value[..., start:stop].copy(), (x,), op="slice_cols")

    def _backward():
        x.grad[..., start:stop] += out.grad

    out._backward = _backward
    return out


def layer_norm(x: GraphNode, gain: GraphNode, bias: GraphNode, eps: float = 1e-5) -> GraphNode:
    """Normalize over the last axis, then apply an affine transform."""
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = GraphNode(normed * gain.value + bias.value, (x, gain, bias), op="layer_norm")

    def _backward():
        g = out.grad
        d_normed = g * gain.value
        # Standard layer-norm backward over the last axis.
        term2 = d_normed.mean(axis=-1, keepdims=True)
        term3 = normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        x.grad += inv * (d_normed - term2 - term3)
        reduce_axes = tuple(range(g.ndim - 1))
        gain.grad += (g * normed).sum(axis=reduce_axes)
        bias.grad += g.sum(axis=reduce_axes)

    out._backward = _backward
    return out


def log_softmax(x, axis: int = -1):
    """Log-probabilities along ``axis``; max-shifted for stability.

    Accepts either a plain array (returns an array) or a GraphNode
    (returns a GraphNode).
    """
    if isinstance(x, GraphNode):
        y = _log_softmax_values(x.value, axis)
        out = GraphNode(y, (x,), op="log_softmax")

        def _backward():
            g = out.grad
            x.grad += g - np.exp(out.value) * g.sum(axis=axis, keepdims=True)

        out._backward = _backward
        return out
    return _log_softmax_values(_as_array(x), axis)


def _log_softmax_values(x: Tensor, axis: int) -> Tensor:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def log_add_exp(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) via max-shift; -inf behaves as log(0)."""
    if a == -math.inf:
        return float(b)
    if b == -math.inf:
        return float(a)
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def masked_attention(
    q: GraphNode, k: GraphNode, v: GraphNode, mask: Tensor, num_heads: int
) -> GraphNode:
    """Multi-head scaled dot-product attention under a boolean mask.

    ``q`` is (Tq, d); ``k`` and ``v`` are (Tk, d); ``mask`` is (Tq, Tk)
    with True marking allowed key positions. Every query row must allow
    at least one key.
    """
    tq, d = q.value.shape
    tk = k.value.shape[0]
    if d % num_heads != 0:
        raise ShapeMismatchError(f"attention: dim {d} not divisible by {num_heads} heads")
    if mask.shape != (tq, tk):
        raise ShapeMismatchError(
            f"attention: mask shape {mask.shape} does not match ({tq}, {tk})"
        )
    if not mask.any(axis=1).all():
        raise ShapeMismatchError("attention: a query row masks out every key")
    dh = d // num_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    qh = q.value.reshape(tq, num_heads, dh)
    kh = k.value.reshape(tk, num_heads, dh)
    vh = v.value.reshape(tk, num_heads, dh)
    scores = np.einsum("qhd,khd->hqk", qh, kh) * inv_sqrt
    scores = np.where(mask[None, :, :], scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    weights = e / e.sum(axis=-1, keepdims=True)
    out_val = np.einsum("hqk,khd->qhd", weights, vh).reshape(tq, d)
    out = GraphNode(out_val, (q, k, v), op="attention")

    def _backward():
        gh = out.grad.reshape(tq, num_heads, dh)
        grad_vh = np.einsum("hqk,qhd->khd", weights, gh)
        grad_w = np.einsum("qhd,khd->hqk", gh, vh)
        # Softmax backward; masked positions carry zero weight already.
        grad_scores = weights * (grad_w - (grad_w * weights).sum(axis=-1, keepdims=True))
        grad_qh = np.einsum("hqk,khd->qhd", grad_scores, kh) * inv_sqrt
        grad_kh = np.einsum("hqk,qhd->khd", grad_scores, qh) * inv_sqrt
        q.grad += grad_qh.reshape(tq, d)
        k.grad += grad_kh.reshape(tk, d)
        v.grad += grad_vh.reshape(tk, d)

    out._backward = _backward
    return out


def dropout(x: GraphNode, rate: float, rng: np.random.Generator) -> GraphNode:
    """Inverted dropout. Identity when rate is zero."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    out = GraphNode(x.value * keep, (x,), op="dropout")

    def _backward():
        x.grad += out.grad * keep

    out._backward = _backward
    return out


def topological_order(root: GraphNode) -> list[GraphNode]:
    """Parents-before-children ordering, computed iteratively."""
    order: list[GraphNode] = []
    visited: set[int] = set()
    stack: list[tuple[GraphNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def evaluate_graph(root: GraphNode) -> Tensor:
    """Return the root's forward value, verifying every node is finite."""
    for node in topological_order(root):
        if not np.all(np.isfinite(node.value)):
            label = node.name or node.op
            raise NonFiniteError(f"non-finite value in node '{label}'")
    return root.value


def backpropagate(root: GraphNode) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` over the whole graph."""
    if root.value.size != 1:
        raise NonScalarRootError(
            f"backpropagation requires a scalar root, got shape {root.value.shape}"
        )
    order = topological_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_gradients(nodes: Iterable[GraphNode]) -> None:
    for node in nodes:
        node.grad[...] = 0.0
