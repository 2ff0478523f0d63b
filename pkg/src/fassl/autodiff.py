"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is define-by-run: while a ``Graph`` context is active, every op
appends a record to the tape, and ``backward`` replays the tape in exact
reverse construction order. With no active graph the same ops run as plain
numpy forward computations, which is what evaluation-only code paths use.

Tensors are immutable values; ``data`` must never be mutated after
construction. Graphs and the tensors recorded on them are confined to one
worker thread (the active-graph stack is thread-local, so concurrent workers
each get their own tape).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sum_all",
    "sum_axis",
    "mean_all",
    "maximum_const",
    "transpose",
    "reshape",
    "gather_rows",
    "concat_cols",
    "l2_normalize_rows",
    "detached_rowmax",
]


class Tensor:
    """A dense float64 array plus a requires_grad flag.

    Values are validated to be finite at construction; NaN/Inf anywhere is a
    contract violation, which keeps numerical blow-ups loud instead of
    silently propagating.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One tape record: output tensor, input tensors, and the local vjp."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


_STACK = threading.local()


def _graph_stack() -> list:
    stack = getattr(_STACK, "graphs", None)
    if stack is None:
        stack = []
        _STACK.graphs = stack
    return stack


def _active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Records ops in construction order; acyclic by construction.

    Use as a context manager around a forward pass, then call
    ``backward(graph, loss, leaves)``. A graph is single-use per forward
    pass; rebuild it for the next one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))
        self._tracked.add(id(out))


def backward(graph: Graph, loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. every requires_grad leaf.

    Walks the tape in exact reverse construction order, so results are
    bit-identical for identical graphs. Leaves that do not reach the loss
    get an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for t, g_in in zip(node.inputs, node.vjp(g_out)):
            if g_in is None or not graph._tracks(t):
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g_in if acc is None else acc + g_in
    out: dict[str, Tensor] = {}
    for name, leaf in leaves.items():
        if not leaf.requires_grad:
            continue
        g = grads.get(id(leaf))
        out[name] = Tensor(np.zeros_like(leaf.data) if g is None else g)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None and any(g._tracks(t) for t in inputs):
        g._record(out, inputs, vjp)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"transpose needs a 2-d tensor, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Subgradient at 0 is fixed to 0 for determinism.
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c) with constant c; gradient passes only where a > c."""
    a = _as_tensor(a)
    return _make(np.maximum(a.data, c), (a,), lambda g: (g * (a.data > c),))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    return _make(
        np.sum(a.data, axis=axis, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(
        np.sum(a.data) / n,
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by an integer index array; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def concat_cols(tensors: Iterable[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    widths = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=1), ts, vjp)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||_2, eps); zero rows stay zero."""
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    x = _as_tensor(x)
    ss = sum_axis(mul(x, x), axis=1)
    denom = sqrt(maximum_const(ss, eps * eps))
    return div(x, denom)


def detached_rowmax(a: Tensor) -> Tensor:
    """Per-row max as a constant (no gradient); used to stabilize log-sum-exp."""
    return Tensor(np.max(a.data, axis=1, keepdims=True))
