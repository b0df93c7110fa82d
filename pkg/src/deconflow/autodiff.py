"""Reverse-mode differentiation over small dense float64 arrays.

Values are numpy arrays of rank <= 2 wrapped in graph ``Node``s. The graph is
built define-by-run; ``backward`` walks it once in reverse topological order
and accumulates adjoints into every reachable node. There is no implicit
broadcasting: each operation states exactly which shapes it accepts, and the
few broadcast-style operations (``add_row``, ``mul_row``, scalar broadcasts)
carry the broadcast in their name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a computed value."""


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 2:
        raise ShapeError(f"rank {v.ndim} > 2 is not supported (shape {v.shape})")
    return v


def _check_finite(v: np.ndarray, op: str) -> None:
    # A single reduction is much cheaper than isfinite over the array; the sum
    # is non-finite iff some entry is (or the values already overflow, which is
    # just as fatal).
    if not np.isfinite(np.sum(v)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Node:
    """One value in the graph: payload, adjoint, and backward rules."""

    __slots__ = ("value", "grad", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = _as_value(value)
        _check_finite(self.value, op)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Node, ...] = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def leaf(value) -> Node:
    """Wrap an array as a graph leaf (a parameter or an input)."""
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and constant ops


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return Node(a.value + b.value, (a, b), (lambda g: g, lambda g: g), "add")


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return Node(a.value - b.value, (a, b), (lambda g: g, lambda g: -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    return Node(a.value * b.value, (a, b),
                (lambda g: g * b.value, lambda g: g * a.value), "mul")


def neg(a: Node) -> Node:
    return Node(-a.value, (a,), (lambda g: -g,), "neg")


def add_const(a: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 0 and c.shape != a.value.shape:
        raise ShapeError(f"add_const: constant shape {c.shape} vs {a.value.shape}")
    return Node(a.value + c, (a,), (lambda g: g,), "add_const")


def mul_const(a: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 0 and c.shape != a.value.shape:
        raise ShapeError(f"mul_const: constant shape {c.shape} vs {a.value.shape}")
    return Node(a.value * c, (a,), (lambda g: g * c,), "mul_const")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out_value = np.exp(a.value)
    return Node(out_value, (a,), (lambda g: g * out_value,), "exp")


def log(a: Node) -> Node:
    # log of a non-positive value yields NaN/-Inf and is surfaced by the
    # finiteness check in Node.__init__.
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.value)
    return Node(v, (a,), (lambda g: g / a.value,), "log")


def relu(a: Node) -> Node:
    # Subgradient at 0 is taken as 0 (strict inequality).
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,), "relu")


# ---------------------------------------------------------------------------
# broadcast ops (explicit by name)


def add_row(mat: Node, vec: Node) -> Node:
    """(N, d) + (d,) broadcast across rows."""
    if mat.value.ndim != 2 or vec.value.ndim != 1 or mat.value.shape[1] != vec.value.shape[0]:
        raise ShapeError(f"add_row: {mat.value.shape} + {vec.value.shape}")
    return Node(mat.value + vec.value[None, :], (mat, vec),
                (lambda g: g, lambda g: g.sum(axis=0)), "add_row")


def sub_row(mat: Node, vec: Node) -> Node:
    """(N, d) - (d,) broadcast across rows."""
    if mat.value.ndim != 2 or vec.value.ndim != 1 or mat.value.shape[1] != vec.value.shape[0]:
        raise ShapeError(f"sub_row: {mat.value.shape} - {vec.value.shape}")
    return Node(mat.value - vec.value[None, :], (mat, vec),
                (lambda g: g, lambda g: -g.sum(axis=0)), "sub_row")


def mul_row(mat: Node, vec: Node) -> Node:
    """(N, d) * (d,) broadcast across rows."""
    if mat.value.ndim != 2 or vec.value.ndim != 1 or mat.value.shape[1] != vec.value.shape[0]:
        raise ShapeError(f"mul_row: {mat.value.shape} * {vec.value.shape}")
    return Node(mat.value * vec.value[None, :], (mat, vec),
                (lambda g: g * vec.value[None, :],
                 lambda g: (g * mat.value).sum(axis=0)), "mul_row")


def add_scalar_node(a: Node, s: Node) -> Node:
    """Array + scalar node, broadcast to every entry."""
    if s.value.ndim != 0:
        raise ShapeError(f"add_scalar_node: scalar operand has shape {s.value.shape}")
    return Node(a.value + s.value, (a, s),
                (lambda g: g, lambda g: np.asarray(g.sum())), "add_scalar_node")


def mul_scalar_node(a: Node, s: Node) -> Node:
    """Array * scalar node, broadcast to every entry."""
    if s.value.ndim != 0:
        raise ShapeError(f"mul_scalar_node: scalar operand has shape {s.value.shape}")
    return Node(a.value * s.value, (a, s),
                (lambda g: g * s.value,
                 lambda g: np.asarray((g * a.value).sum())), "mul_scalar_node")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        return Node(av @ bv, (a, b),
                    (lambda g: g @ bv.T, lambda g: av.T @ g), "matmul")
    if av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        return Node(av @ bv, (a, b),
                    (lambda g: np.outer(g, bv), lambda g: av.T @ g), "matmul")
    if av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        return Node(av @ bv, (a, b),
                    (lambda g: bv @ g, lambda g: np.outer(av, g)), "matmul")
    raise ShapeError(f"matmul: unsupported ranks {av.ndim} @ {bv.ndim}")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose: rank-2 operand required")
    return Node(a.value.T, (a,), (lambda g: g.T,), "transpose")


def diag_embed(v: Node) -> Node:
    """(n,) -> (n, n) diagonal matrix."""
    if v.value.ndim != 1:
        raise ShapeError("diag_embed: rank-1 operand required")
    return Node(np.diag(v.value), (v,), (lambda g: np.diagonal(g).copy(),), "diag_embed")


def solve_lower(l_mat: Node, rhs: Node) -> Node:
    """Row-batched triangular solve: returns Z with Z @ L^T = rhs.

    ``l_mat`` is (n, n) lower-triangular and invertible, ``rhs`` is (N, n).
    """
    lv, rv = l_mat.value, rhs.value
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1] or rv.ndim != 2 or rv.shape[1] != lv.shape[0]:
        raise ShapeError(f"solve_lower: {lv.shape} vs {rv.shape}")
    z = np.linalg.solve(lv, rv.T).T

    def grad_l(g):
        gz = np.linalg.solve(lv.T, g.T).T  # g @ L^{-T}
        return -(gz.T @ z)

    def grad_rhs(g):
        return np.linalg.solve(lv.T, g.T).T

    return Node(z, (l_mat, rhs), (grad_l, grad_rhs), "solve_lower")


# ---------------------------------------------------------------------------
# reductions, reshapes, gathers


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - numpy-style name
    av = a.value
    if axis is None:
        return Node(np.asarray(av.sum()), (a,),
                    (lambda g: np.broadcast_to(g, av.shape).copy() if av.ndim else g,), "sum")
    if av.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum: axis {axis} on shape {av.shape}")
    if axis == 0:
        return Node(av.sum(axis=0), (a,),
                    (lambda g: np.broadcast_to(g[None, :], av.shape).copy(),), "sum")
    return Node(av.sum(axis=1), (a,),
                (lambda g: np.broadcast_to(g[:, None], av.shape).copy(),), "sum")


def logsumexp(a: Node, axis: int | None = None) -> Node:
    """Stable log-sum-exp; gradient is the softmax of the operand."""
    av = a.value
    if axis is None:
        m = av.max()
        out = m + np.log(np.exp(av - m).sum())
        soft = np.exp(av - out)
        return Node(np.asarray(out), (a,), (lambda g: g * soft,), "logsumexp")
    if av.ndim != 2 or axis != 1:
        raise ShapeError(f"logsumexp: axis {axis} on shape {av.shape}")
    m = av.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(av - m).sum(axis=1, keepdims=True)))[:, 0]
    soft = np.exp(av - out[:, None])
    return Node(out, (a,), (lambda g: g[:, None] * soft,), "logsumexp")


def concat_cols(parts: list[Node]) -> Node:
    """Concatenate (N, k_i) blocks along columns."""
    if not parts or any(p.value.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: rank-2 operands required")
    rows = parts[0].value.shape[0]
    if any(p.value.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def make_vjp(i):
        return lambda g: g[:, offsets[i]:offsets[i + 1]]

    return Node(np.concatenate([p.value for p in parts], axis=1),
                tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), "concat_cols")


def stack_cols(parts: list[Node]) -> Node:
    """Stack (N,) vectors into an (N, K) matrix."""
    if not parts or any(p.value.ndim != 1 for p in parts):
        raise ShapeError("stack_cols: rank-1 operands required")
    n = parts[0].value.shape[0]
    if any(p.value.shape[0] != n for p in parts):
        raise ShapeError("stack_cols: lengths differ")

    def make_vjp(i):
        return lambda g: g[:, i]

    return Node(np.stack([p.value for p in parts], axis=1),
                tuple(parts), tuple(make_vjp(i) for i in range(len(parts))), "stack_cols")


def slice_cols(a: Node, j0: int, j1: int) -> Node:
    if a.value.ndim != 2 or not (0 <= j0 <= j1 <= a.value.shape[1]):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] on shape {a.value.shape}")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, j0:j1] = g
        return out

    return Node(a.value[:, j0:j1].copy(), (a,), (vjp,), "slice_cols")


def slice_row(a: Node, i: int) -> Node:
    """Row i of an (K, d) matrix as a (d,) vector."""
    if a.value.ndim != 2 or not (0 <= i < a.value.shape[0]):
        raise ShapeError(f"slice_row: row {i} on shape {a.value.shape}")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[i, :] = g
        return out

    return Node(a.value[i, :].copy(), (a,), (vjp,), "slice_row")


def gather_cols(a: Node, idx) -> Node:
    """Column gather: out[:, j] = a[:, idx[j]]. Handles repeated indices."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.value.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_cols: shape {a.value.shape}, idx rank {idx.ndim}")

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out.T, idx, g.T)
        return out

    return Node(a.value[:, idx].copy(), (a,), (vjp,), "gather_cols")


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar root."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")
    order = _toposort(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contrib


def reset_grads(nodes) -> None:
    for n in nodes:
        n.grad = None


# ---------------------------------------------------------------------------
# multilayer perceptron (ReLU hidden layers, identity output)


@dataclass
class MlpParams:
    """Weights (fan_in, fan_out) and biases per layer; ReLU between layers."""

    weights: list[Node]
    biases: list[Node]

    def parameters(self) -> list[Node]:
        return [*self.weights, *self.biases]

    @property
    def in_dim(self) -> int:
        return self.weights[0].value.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].value.shape[1]


def init_mlp(sizes: list[int], rng: np.random.Generator, weight_scale: float = 1.0,
             zero_last: bool = False) -> MlpParams:
    """He-style initialization; optionally zero the output layer."""
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) * weight_scale * np.sqrt(2.0 / fan_in)
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        weights.append(leaf(w))
        biases.append(leaf(np.zeros(fan_out)))
    return MlpParams(weights, biases)


def forward_mlp(params: MlpParams, x: Node) -> Node:
    """Piecewise-affine image of ``x`` (rows are samples)."""
    h = x
    if h.value.ndim != 2 or h.value.shape[1] != params.in_dim:
        raise ShapeError(
            f"forward_mlp: input shape {h.value.shape} vs first layer in_dim {params.in_dim}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add_row(matmul(h, w), b)
        if i != last:
            h = relu(h)
    return h
