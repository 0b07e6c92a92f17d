"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Value`` wraps a numpy buffer plus an accumulated gradient buffer and
remembers the operation that produced it. ``backward`` walks the graph in
reverse topological order and *adds* each pass's adjoints into ``.grad``,
so gradients accumulate across calls and must be zeroed explicitly
(``SgdOptimizer.step`` does this after applying the update).

Everything runs in double precision: the whole test story leans on central
finite differences, which need the headroom.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# per-thread so parallel evaluation batches cannot toggle each other's graphs
_tls = threading.local()


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager suppressing graph construction (inference paths)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _tls.grad_enabled = False

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


class Value:
    """Node in the differentiation graph: data, grad, and producing op."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Value, ...] = ()
        self.op: str | None = None
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below do the work
    def __add__(self, other):
        return add(self, as_value(other))

    def __sub__(self, other):
        return sub(self, as_value(other))

    def __mul__(self, other):
        return mul(self, as_value(other))

    def __truediv__(self, other):
        return div(self, as_value(other))

    def __neg__(self):
        return neg(self)


def as_value(x, requires_grad: bool = False) -> Value:
    return x if isinstance(x, Value) else Value(x, requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, parents: tuple[Value, ...], backward_fn) -> Value:
    """Wrap an op result, recording the graph edge only when grads can flow."""
    out = Value(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.op = op
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an upstream gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same_shape(kind: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Value, b: Value) -> Value:
    _check_same_shape("add", a, b)
    data = a.data + b.data

    def backward_fn(adj):
        return _unbroadcast(adj, a.shape), _unbroadcast(adj, b.shape)

    return _make(data, "add", (a, b), backward_fn)


def sub(a: Value, b: Value) -> Value:
    _check_same_shape("sub", a, b)
    data = a.data - b.data

    def backward_fn(adj):
        return _unbroadcast(adj, a.shape), _unbroadcast(-adj, b.shape)

    return _make(data, "sub", (a, b), backward_fn)


def mul(a: Value, b: Value) -> Value:
    _check_same_shape("mul", a, b)
    data = a.data * b.data

    def backward_fn(adj):
        return _unbroadcast(adj * b.data, a.shape), _unbroadcast(adj * a.data, b.shape)

    return _make(data, "mul", (a, b), backward_fn)


def div(a: Value, b: Value) -> Value:
    _check_same_shape("div", a, b)
    data = a.data / b.data

    def backward_fn(adj):
        ga = _unbroadcast(adj / b.data, a.shape)
        gb = _unbroadcast(-adj * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, "div", (a, b), backward_fn)


def neg(a: Value) -> Value:
    def backward_fn(adj):
        return (-adj,)

    return _make(-a.data, "neg", (a,), backward_fn)


def scale(a: Value, factor: float) -> Value:
    """Multiply by a python scalar constant."""
    factor = float(factor)

    def backward_fn(adj):
        return (adj * factor,)

    return _make(a.data * factor, "scale", (a,), backward_fn)


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError(f"matmul: needs 1-D/2-D operands, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(adj):
        adj = np.asarray(adj)
        am, bm = a.data, b.data
        # promote 1-D operands so one transpose rule covers all cases
        a2 = am[None, :] if am.ndim == 1 else am
        b2 = bm[:, None] if bm.ndim == 1 else bm
        adj2 = adj.reshape((a2.shape[0], b2.shape[1]))
        ga = adj2 @ b2.T
        gb = a2.T @ adj2
        return ga.reshape(am.shape), gb.reshape(bm.shape)

    return _make(data, "matmul", (a, b), backward_fn)


def relu(a: Value) -> Value:
    mask = a.data > 0

    def backward_fn(adj):
        return (adj * mask,)

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), backward_fn)


def log(a: Value) -> Value:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def backward_fn(adj):
        return (adj / a.data,)

    return _make(np.log(a.data), "log", (a,), backward_fn)


def log_softmax(a: Value) -> Value:
    """Row-wise log-softmax with max subtraction for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward_fn(adj):
        return (adj - soft * adj.sum(axis=-1, keepdims=True),)

    return _make(data, "log_softmax", (a,), backward_fn)


def softmax(a: Value) -> Value:
    """Row-wise softmax (stable); rows sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(adj):
        return (data * (adj - (adj * data).sum(axis=-1, keepdims=True)),)

    return _make(data, "softmax", (a,), backward_fn)


def mse(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).sum() / n)

    def backward_fn(adj):
        g = (2.0 / n) * diff * adj
        return g, -g

    return _make(data, "mse", (a, b), backward_fn)


def vsum(a: Value) -> Value:
    """Sum of all elements -> scalar."""

    def backward_fn(adj):
        return (np.full_like(a.data, float(adj)),)

    return _make(np.asarray(a.data.sum()), "sum", (a,), backward_fn)


def vmean(a: Value) -> Value:
    """Mean of all elements -> scalar."""
    n = a.data.size

    def backward_fn(adj):
        return (np.full_like(a.data, float(adj) / n),)

    return _make(np.asarray(a.data.mean()), "mean", (a,), backward_fn)


def l2_norm(a: Value) -> Value:
    """Row-wise Euclidean norm for 2-D input, full norm for 1-D."""
    axis = -1 if a.data.ndim else None
    data = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward_fn(adj):
        # undefined at exactly zero; callers guard (cosine losses reject
        # zero-norm embeddings before dividing)
        denom = np.where(data == 0, 1.0, data)
        return (a.data * (adj / denom)[..., None] if a.data.ndim > 1
                else a.data * (adj / denom),)

    return _make(np.asarray(data), "l2_norm", (a,), backward_fn)


def dot(a: Value, b: Value) -> Value:
    """Row-wise dot product: (B,D)x(B,D)->(B,), (D,)x(D,)->scalar."""
    if a.shape != b.shape:
        raise ValueError(f"dot: shapes differ {a.shape} vs {b.shape}")
    data = (a.data * b.data).sum(axis=-1)

    def backward_fn(adj):
        adj_e = np.asarray(adj)[..., None] if a.data.ndim > 1 else adj
        return adj_e * b.data, adj_e * a.data

    return _make(np.asarray(data), "dot", (a, b), backward_fn)


def gather_rows(a: Value, index: np.ndarray) -> Value:
    """out[i] = a[i, index[i]]; used for picking per-row class entries."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ValueError(f"gather_rows: expected 2-D input, got {a.shape}")
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, index]

    def backward_fn(adj):
        g = np.zeros_like(a.data)
        np.add.at(g, (rows, index), adj)
        return (g,)

    return _make(data, "gather_rows", (a,), backward_fn)


def max_rows(a: Value) -> Value:
    """Row-wise maximum; subgradient goes to the lowest-index argmax."""
    if a.data.ndim != 2:
        raise ValueError(f"max_rows: expected 2-D input, got {a.shape}")
    arg = np.argmax(a.data, axis=1)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, arg]

    def backward_fn(adj):
        g = np.zeros_like(a.data)
        np.add.at(g, (rows, arg), adj)
        return (g,)

    return _make(data, "max_rows", (a,), backward_fn)


def detach(a: Value) -> Value:
    """Stop-gradient: shares the data buffer, records no parent edge."""
    out = Value.__new__(Value)
    out.data = a.data
    out.grad = np.zeros_like(a.data)
    out.requires_grad = False
    out.parents = ()
    out.op = None
    out._backward_fn = None
    return out


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "matmul": matmul,
    "relu": relu,
    "log": log,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "mse": mse,
    "sum": vsum,
    "mean": vmean,
    "l2_norm": l2_norm,
    "dot": dot,
    "gather_rows": gather_rows,
    "max_rows": max_rows,
}


def forward_op(kind: str, inputs: Sequence) -> Value:
    """Dispatch an operation by name (inputs coerced to Value where sensible)."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind: {kind!r}")
    fn = _OPS[kind]
    if kind in ("gather_rows",):
        return fn(as_value(inputs[0]), inputs[1])
    if kind == "scale":
        return fn(as_value(inputs[0]), inputs[1])
    return fn(*[as_value(x) for x in inputs])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Value) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node.

    Adjoints are computed fresh per call and then added, so running backward
    twice without zeroing doubles every gradient exactly.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar-shaped, got {root.shape}")

    topo: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        adj = adjoint.get(id(node))
        if adj is None or node._backward_fn is None:
            continue
        for parent, contribution in zip(node.parents, node._backward_fn(adj)):
            prev = adjoint.get(id(parent))
            if prev is None:
                adjoint[id(parent)] = np.array(contribution, dtype=np.float64, copy=True)
            else:
                prev += contribution

    for node in topo:
        if node.requires_grad or node is root:
            adj = adjoint.get(id(node))
            if adj is not None:
                node.grad += adj.reshape(node.grad.shape)


# ---------------------------------------------------------------------------
# composite losses shared across modules
# ---------------------------------------------------------------------------

def cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean cross-entropy of row logits against integer labels."""
    return neg(vmean(gather_rows(log_softmax(logits), labels)))


def batch_cosine(a: Value, b: Value) -> Value:
    """Row-wise cosine similarity; rejects zero-norm rows (collapse signal)."""
    na, nb = l2_norm(a), l2_norm(b)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise ValueError("batch_cosine: zero-norm embedding")
    return div(dot(a, b), mul(na, nb))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SgdOptimizer:
    """SGD with momentum and weight decay; zeroes grads after each step.

    Update: v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v.
    """

    def __init__(self, params: Iterable[Value], learning_rate: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.learning_rate * v
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


def sgd_step(params: Sequence[Value], state: SgdOptimizer) -> None:
    """Functional form of the optimizer update (params must match state)."""
    given = list(params)
    if len(given) != len(state.params) or any(
            a is not b for a, b in zip(given, state.params)):
        raise ValueError("sgd_step: params do not match optimizer state")
    state.step()
