"""Dense float64 tensors on a dynamic tape with reverse-mode differentiation.

Everything is desk-scale: values are small numpy arrays (scalars, vectors,
matrices), the tape is rebuilt per sequence, and backward is a single reverse
walk over the tape. Adjoints are computed in fresh per-call buffers and added
into ``Node.grad``, so repeated ``backward`` calls accumulate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Node", "tensor", "backward", "elementwise",
    "add", "sub", "mul", "neg", "scale", "exp", "log", "tanh", "sigmoid",
    "relu", "softplus", "linear", "matvec", "matvec_t", "dot", "vsum",
    "sumsq", "concat", "stack", "vslice", "row", "pick", "softmax",
    "log_softmax", "add_n", "reshape", "transpose", "matmul", "add_col",
    "concat_rows", "rowslice", "softmax_cols",
]


def tensor(data, checked: bool = True) -> np.ndarray:
    """Coerce to a float64 array, rejecting NaN/Inf when checked."""
    arr = np.asarray(data, dtype=np.float64, order="C")
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


class Node:
    """One value in the computation graph.

    ``value`` and ``grad`` always share a shape; ``parents`` point backwards
    to the inputs of the producing operation, so the tape order is already
    topological.
    """

    __slots__ = ("tape", "value", "parents", "op", "_grad", "_bw", "_adj")

    def __init__(self, tape, value, parents=(), op="leaf", bw=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.op = op
        self._grad = None
        self._bw = bw
        self._adj = None
        tape._nodes.append(self)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of Nodes, rebuilt per sequence (define-by-run).

    A tape and its nodes belong to one thread. ``checked`` turns on
    value-domain validation (finite inputs, positive log arguments).
    """

    __slots__ = ("_nodes", "checked")

    def __init__(self, checked: bool = False):
        self._nodes = []
        self.checked = checked

    def __len__(self):
        return len(self._nodes)

    def nodes(self):
        return list(self._nodes)

    def leaf(self, data, op: str = "leaf") -> Node:
        return Node(self, tensor(data, checked=self.checked), (), op)

    def const(self, data) -> Node:
        return Node(self, tensor(data, checked=self.checked), (), "const")


def _same_tape(*nodes) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _acc(node: Node, g: np.ndarray):
    # adjoint buffers are never mutated in place, so aliasing is safe
    node._adj = g if node._adj is None else node._adj + g


def backward(tape: Tape, root: Node):
    """Accumulate d(root)/d(node) into every node's grad; root must be scalar."""
    if root.value.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    nodes = tape._nodes
    for n in nodes:
        n._adj = None
    root._adj = np.ones((), dtype=np.float64)
    for n in reversed(nodes):
        if n._adj is not None and n._bw is not None:
            n._bw(n._adj)
    for n in nodes:
        if n._adj is not None:
            n._grad = n._adj.copy() if n._grad is None else n._grad + n._adj
            n._adj = None


# ---------------------------------------------------------------------------
# elementwise operations


def _coerce(tape: Tape, x):
    if isinstance(x, Node):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _binary_shapes(xv: np.ndarray, yv: np.ndarray, op: str):
    if xv.shape == yv.shape or xv.shape == () or yv.shape == ():
        return
    raise ValueError(f"{op}: shape mismatch {xv.shape} vs {yv.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # undo scalar broadcast in the backward pass
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else g

def add(x, y) -> Node:
    tape = _same_tape(*(n for n in (x, y) if isinstance(n, Node)))
    x, y = _coerce(tape, x), _coerce(tape, y)
    _binary_shapes(x.value, y.value, "add")
    val = x.value + y.value

    def bw(adj):
        _acc(x, _reduce_to(adj, x.value.shape))
        _acc(y, _reduce_to(adj, y.value.shape))

    return Node(tape, val, (x, y), "add", bw)


def sub(x, y) -> Node:
    tape = _same_tape(*(n for n in (x, y) if isinstance(n, Node)))
    x, y = _coerce(tape, x), _coerce(tape, y)
    _binary_shapes(x.value, y.value, "sub")
    val = x.value - y.value

    def bw(adj):
        _acc(x, _reduce_to(adj, x.value.shape))
        _acc(y, _reduce_to(-adj, y.value.shape))

    return Node(tape, val, (x, y), "sub", bw)


def mul(x, y) -> Node:
    tape = _same_tape(*(n for n in (x, y) if isinstance(n, Node)))
    x, y = _coerce(tape, x), _coerce(tape, y)
    _binary_shapes(x.value, y.value, "mul")
    xv, yv = x.value, y.value
    val = xv * yv

    def bw(adj):
        _acc(x, _reduce_to(adj * yv, xv.shape))
        _acc(y, _reduce_to(adj * xv, yv.shape))

    return Node(tape, val, (x, y), "mul", bw)


def neg(x: Node) -> Node:
    def bw(adj):
        _acc(x, -adj)

    return Node(x.tape, -x.value, (x,), "neg", bw)


def scale(x: Node, c: float) -> Node:
    """Multiply by a plain float constant (no constant node, no grad for c)."""
    c = float(c)

    def bw(adj):
        _acc(x, adj * c)

    return Node(x.tape, x.value * c, (x,), "scale", bw)


def exp(x: Node) -> Node:
    val = np.exp(x.value)

    def bw(adj):
        _acc(x, adj * val)

    return Node(x.tape, val, (x,), "exp", bw)


def log(x: Node) -> Node:
    xv = x.value
    if x.tape.checked and np.any(xv <= 0.0):
        raise ValueError("log of non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(xv)

    def bw(adj):
        _acc(x, adj / xv)

    return Node(x.tape, val, (x,), "log", bw)


def tanh(x: Node) -> Node:
    val = np.tanh(x.value)

    def bw(adj):
        _acc(x, adj * (1.0 - val * val))

    return Node(x.tape, val, (x,), "tanh", bw)


def _sigmoid_val(v: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(v))
    return np.where(v >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x: Node) -> Node:
    val = _sigmoid_val(x.value)

    def bw(adj):
        _acc(x, adj * val * (1.0 - val))

    return Node(x.tape, val, (x,), "sigmoid", bw)


def relu(x: Node) -> Node:
    mask = x.value > 0.0
    val = np.where(mask, x.value, 0.0)

    def bw(adj):
        _acc(x, adj * mask)

    return Node(x.tape, val, (x,), "relu", bw)


def softplus(x: Node) -> Node:
    xv = x.value
    # log1p(exp(-|x|)) + max(x, 0): stable for large |x|, strictly positive
    val = np.log1p(np.exp(-np.abs(xv))) + np.maximum(xv, 0.0)
    sig = _sigmoid_val(xv)

    def bw(adj):
        _acc(x, adj * sig)

    return Node(x.tape, val, (x,), "softplus", bw)


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid,
    "relu": relu, "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, x, y=None) -> Node:
    """Dispatch an elementwise op by name; binary ops allow scalar broadcast."""
    if kind in _UNARY:
        if y is not None:
            raise ValueError(f"{kind} is unary")
        return _UNARY[kind](x)
    if kind in _BINARY:
        if y is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](x, y)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and structural operations


def linear(W: Node, x: Node, b: Node) -> Node:
    """W @ x + b for W (out, in), x (in,), b (out,)."""
    tape = _same_tape(W, x, b)
    Wv, xv, bv = W.value, x.value, b.value
    if Wv.ndim != 2 or xv.ndim != 1 or bv.ndim != 1:
        raise ValueError("linear expects matrix, vector, vector")
    if Wv.shape[1] != xv.shape[0] or Wv.shape[0] != bv.shape[0]:
        raise ValueError(f"linear: incompatible shapes {Wv.shape}, {xv.shape}, {bv.shape}")
    val = Wv @ xv + bv

    def bw(adj):
        _acc(W, adj[:, None] * xv[None, :])
        _acc(x, Wv.T @ adj)
        _acc(b, adj)

    return Node(tape, val, (W, x, b), "linear", bw)


def matvec(A: Node, x: Node) -> Node:
    tape = _same_tape(A, x)
    Av, xv = A.value, x.value
    if Av.ndim != 2 or xv.ndim != 1 or Av.shape[1] != xv.shape[0]:
        raise ValueError(f"matvec: incompatible shapes {Av.shape}, {xv.shape}")
    val = Av @ xv

    def bw(adj):
        _acc(A, adj[:, None] * xv[None, :])
        _acc(x, Av.T @ adj)

    return Node(tape, val, (A, x), "matvec", bw)


def matvec_t(A: Node, x: Node) -> Node:
    """A.T @ x for A (n, m), x (n,) -> (m,)."""
    tape = _same_tape(A, x)
    Av, xv = A.value, x.value
    if Av.ndim != 2 or xv.ndim != 1 or Av.shape[0] != xv.shape[0]:
        raise ValueError(f"matvec_t: incompatible shapes {Av.shape}, {xv.shape}")
    val = Av.T @ xv

    def bw(adj):
        _acc(A, xv[:, None] * adj[None, :])
        _acc(x, Av @ adj)

    return Node(tape, val, (A, x), "matvec_t", bw)


def dot(x: Node, y: Node) -> Node:
    tape = _same_tape(x, y)
    xv, yv = x.value, y.value
    if xv.shape != yv.shape or xv.ndim != 1:
        raise ValueError(f"dot: incompatible shapes {xv.shape}, {yv.shape}")
    val = np.asarray(xv @ yv)

    def bw(adj):
        _acc(x, adj * yv)
        _acc(y, adj * xv)

    return Node(tape, val, (x, y), "dot", bw)


def vsum(x: Node) -> Node:
    val = np.asarray(np.sum(x.value))

    def bw(adj):
        _acc(x, np.broadcast_to(adj, x.value.shape))

    return Node(x.tape, val, (x,), "vsum", bw)


def sumsq(x: Node) -> Node:
    xv = x.value
    val = np.asarray(np.sum(xv * xv))

    def bw(adj):
        _acc(x, (2.0 * adj) * xv)

    return Node(x.tape, val, (x,), "sumsq", bw)


def add_n(xs) -> Node:
    """Sum a non-empty list of same-shaped nodes in one node."""
    xs = list(xs)
    if not xs:
        raise ValueError("add_n of empty list")
    tape = _same_tape(*xs)
    shape = xs[0].value.shape
    for n in xs[1:]:
        if n.value.shape != shape:
            raise ValueError("add_n: shape mismatch")
    val = xs[0].value.copy()
    for n in xs[1:]:
        val += n.value

    def bw(adj):
        for n in xs:
            _acc(n, adj)

    return Node(tape, val, tuple(xs), "add_n", bw)


def concat(parts) -> Node:
    """Concatenate 1-d nodes."""
    parts = list(parts)
    tape = _same_tape(*parts)
    for p in parts:
        if p.value.ndim != 1:
            raise ValueError("concat expects vectors")
    val = np.concatenate([p.value for p in parts])
    bounds = []
    off = 0
    for p in parts:
        bounds.append((off, off + p.value.shape[0]))
        off = bounds[-1][1]

    def bw(adj):
        for p, (a, b) in zip(parts, bounds):
            _acc(p, adj[a:b])

    return Node(tape, val, tuple(parts), "concat", bw)


def stack(rows) -> Node:
    """Stack same-shaped nodes along a new leading axis."""
    rows = list(rows)
    if not rows:
        raise ValueError("stack of empty list")
    tape = _same_tape(*rows)
    val = np.stack([r.value for r in rows])

    def bw(adj):
        for i, r in enumerate(rows):
            _acc(r, adj[i])

    return Node(tape, val, tuple(rows), "stack", bw)


def vslice(x: Node, start: int, stop: int) -> Node:
    if x.value.ndim != 1:
        raise ValueError("vslice expects a vector")
    n = x.value.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"vslice [{start}:{stop}] out of range for length {n}")
    val = x.value[start:stop]

    def bw(adj):
        g = np.zeros_like(x.value)
        g[start:stop] = adj
        _acc(x, g)

    return Node(x.tape, val, (x,), "vslice", bw)


def row(A: Node, i: int) -> Node:
    if A.value.ndim != 2:
        raise ValueError("row expects a matrix")
    if not (0 <= i < A.value.shape[0]):
        raise ValueError(f"row {i} out of range")
    val = A.value[i]

    def bw(adj):
        g = np.zeros_like(A.value)
        g[i] = adj
        _acc(A, g)

    return Node(A.tape, val, (A,), "row", bw)


def pick(x: Node, i: int) -> Node:
    if x.value.ndim != 1:
        raise ValueError("pick expects a vector")
    if not (0 <= i < x.value.shape[0]):
        raise ValueError(f"pick index {i} out of range")
    val = np.asarray(x.value[i])

    def bw(adj):
        g = np.zeros_like(x.value)
        g[i] = adj
        _acc(x, g)

    return Node(x.tape, val, (x,), "pick", bw)


def softmax(x: Node) -> Node:
    xv = x.value
    if xv.ndim != 1 or xv.shape[0] == 0:
        raise ValueError("softmax expects a non-empty vector")
    e = np.exp(xv - np.max(xv))
    val = e / np.sum(e)

    def bw(adj):
        _acc(x, val * (adj - np.dot(val, adj)))

    return Node(x.tape, val, (x,), "softmax", bw)


def log_softmax(x: Node) -> Node:
    xv = x.value
    if xv.ndim != 1 or xv.shape[0] == 0:
        raise ValueError("log_softmax expects a non-empty vector")
    m = np.max(xv)
    shifted = xv - m
    lse = m + np.log(np.sum(np.exp(shifted)))
    val = xv - lse
    soft = np.exp(val)

    def bw(adj):
        _acc(x, adj - soft * np.sum(adj))

    return Node(x.tape, val, (x,), "log_softmax", bw)


# ---------------------------------------------------------------------------
# batched matrix operations (one node covers all channels of a token)


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    val = x.value.reshape(shape)

    def bw(adj):
        _acc(x, adj.reshape(x.value.shape))

    return Node(x.tape, val, (x,), "reshape", bw)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ValueError("transpose expects a matrix")
    val = x.value.T

    def bw(adj):
        _acc(x, adj.T)

    return Node(x.tape, val, (x,), "transpose", bw)


def matmul(A: Node, B: Node) -> Node:
    tape = _same_tape(A, B)
    Av, Bv = A.value, B.value
    if Av.ndim != 2 or Bv.ndim != 2 or Av.shape[1] != Bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {Av.shape}, {Bv.shape}")
    val = Av @ Bv

    def bw(adj):
        _acc(A, adj @ Bv.T)
        _acc(B, Av.T @ adj)

    return Node(tape, val, (A, B), "matmul", bw)


def add_col(A: Node, b: Node) -> Node:
    """A + b[:, None]: add a bias vector to every column."""
    tape = _same_tape(A, b)
    Av, bv = A.value, b.value
    if Av.ndim != 2 or bv.ndim != 1 or Av.shape[0] != bv.shape[0]:
        raise ValueError(f"add_col: incompatible shapes {Av.shape}, {bv.shape}")
    val = Av + bv[:, None]

    def bw(adj):
        _acc(A, adj)
        _acc(b, adj.sum(axis=1))

    return Node(tape, val, (A, b), "add_col", bw)


def concat_rows(parts) -> Node:
    """Concatenate matrices along axis 0 (equal column counts)."""
    parts = list(parts)
    tape = _same_tape(*parts)
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.ndim != 2 or p.value.shape[1] != cols:
            raise ValueError("concat_rows expects matrices with equal column counts")
    val = np.concatenate([p.value for p in parts], axis=0)
    bounds = []
    off = 0
    for p in parts:
        bounds.append((off, off + p.value.shape[0]))
        off = bounds[-1][1]

    def bw(adj):
        for p, (a, b) in zip(parts, bounds):
            _acc(p, adj[a:b])

    return Node(tape, val, tuple(parts), "concat_rows", bw)


def rowslice(A: Node, start: int, stop: int) -> Node:
    if A.value.ndim != 2:
        raise ValueError("rowslice expects a matrix")
    n = A.value.shape[0]
    if not (0 <= start <= stop <= n):
        raise ValueError(f"rowslice [{start}:{stop}] out of range for {n} rows")
    val = A.value[start:stop]

    def bw(adj):
        g = np.zeros_like(A.value)
        g[start:stop] = adj
        _acc(A, g)

    return Node(A.tape, val, (A,), "rowslice", bw)


def softmax_cols(S: Node) -> Node:
    """Column-wise softmax of a matrix with max-subtraction per column."""
    Sv = S.value
    if Sv.ndim != 2 or Sv.shape[0] == 0:
        raise ValueError("softmax_cols expects a matrix with at least one row")
    e = np.exp(Sv - np.max(Sv, axis=0, keepdims=True))
    val = e / np.sum(e, axis=0, keepdims=True)

    def bw(adj):
        _acc(S, val * (adj - np.sum(val * adj, axis=0, keepdims=True)))

    return Node(S.tape, val, (S,), "softmax_cols", bw)
