"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Graph` is a tape: every op appends a :class:`Node` holding its
inputs, its output and a closure mapping the output gradient to input
gradients. :func:`backward` walks the tape once in reverse.

Layouts are row-major and batch-first: a batch of vectors is ``(B, n)`` and
an affine map is applied as ``x @ W`` with ``W`` of shape ``(n_in, n_out)``.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64
DEFAULT_LEAKY_SLOPE = 0.01

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array, optionally attached to a graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")

    def __init__(self, data, requires_grad=False, name=None, graph=None):
        arr = np.asarray(data, dtype=DTYPE)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # weak, so the graph -> node -> tensor -> graph cycle does not pin every tape
        self._graph = weakref.ref(graph) if graph is not None else None

    @property
    def graph(self) -> Optional["Graph"]:
        return self._graph() if self._graph is not None else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Optional[BackwardFn]


@dataclass
class Graph:
    """Tape of ops for one forward pass.

    With ``grad_enabled=False`` parameters are created as plain constants and
    no backward closures are retained; used for finite-difference probes and
    evaluation.
    """

    grad_enabled: bool = True
    nodes: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)

    def parameter(self, name: str, data) -> Tensor:
        if name in self.parameters:
            raise UsageError(f"parameter {name!r} registered twice")
        t = Tensor(data, requires_grad=self.grad_enabled, name=name, graph=self)
        self.parameters[name] = t
        return t

    def constant(self, data, name=None) -> Tensor:
        return Tensor(data, requires_grad=False, name=name, graph=self)

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: BackwardFn) -> Tensor:
        """Append an op. ``backward`` returns one gradient (or None) per input."""
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced by {op}")
        requires_grad = self.grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=requires_grad, graph=self)
        if self.grad_enabled:
            self.nodes.append(Node(op, tuple(inputs), result,
                                   backward if requires_grad else None))
        return result


def _graph_of(*tensors: Tensor) -> Graph:
    graph = None
    for t in tensors:
        if t.graph is not None:
            if graph is not None and t.graph is not graph:
                raise UsageError("tensors belong to different graphs")
            graph = t.graph
    if graph is None:
        # constants only; give them a throwaway tape
        graph = Graph(grad_enabled=False)
    return graph


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _graph_of(a, b).record("matmul", (a, b), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _graph_of(a, b).record("add", (a, b), a.data + b.data, lambda g: (g, g))
    row = b.data.reshape(-1)
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and row.size == a.shape[1] \
            and (b.data.ndim == 1 or b.shape[0] == 1):
        bshape = b.shape

        def backward(g):
            return g, g.sum(axis=0).reshape(bshape)

        return _graph_of(a, b).record("add", (a, b), a.data + row, backward)
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _graph_of(a, b).record("hadamard", (a, b), A * B, lambda g: (g * B, g * A))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` (B, n) by the scalar ``s[i]`` (B, 1)."""
    if x.data.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: need (B, n) and (B, 1), got {x.shape}, {s.shape}")
    X, S = x.data, s.data

    def backward(g):
        return g * S, np.sum(g * X, axis=1, keepdims=True)

    return _graph_of(x, s).record("scale_rows", (x, s), X * S, backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _graph_of(x).record("scale", (x,), x.data * c, lambda g: (g * c,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return _graph_of(x).record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    X = x.data
    pos = X >= 0
    out = np.where(pos, X, slope * X)
    return _graph_of(x).record("leaky_relu", (x,), out,
                               lambda g: (np.where(pos, g, slope * g),))


def elementwise(kind: str, *operands: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Dispatch by name to add / hadamard / sigmoid / leaky_relu."""
    if kind == "add":
        return add(*operands)
    if kind == "hadamard":
        return hadamard(*operands)
    if kind == "sigmoid":
        return sigmoid(*operands)
    if kind == "leaky_relu":
        return leaky_relu(*operands, slope=slope)
    raise UsageError(f"unknown elementwise kind {kind!r}")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: no parts")
    if len(parts) == 1:
        return parts[0]
    ndim = parts[0].data.ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.data.ndim != ndim or any(
                p.shape[d] != parts[0].shape[d] for d in range(ndim) if d != ax):
            raise DimensionError(f"concat: incompatible extents {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(parts)))

    out = np.concatenate([p.data for p in parts], axis=ax)
    return _graph_of(*parts).record("concat", parts, out, backward)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.data.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"slice: [{start}, {stop}) out of range for extent {x.shape[ax]}")
    index = [slice(None)] * x.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _graph_of(x).record("slice", (x,), x.data[index].copy(), backward)


def reshape(x: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {new_shape}")
    old = x.shape
    return _graph_of(x).record("reshape", (x,), x.data.reshape(new_shape),
                               lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _graph_of(x).record("sum", (x,), np.asarray(x.data.sum()),
                               lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _graph_of(x).record("mean", (x,), np.asarray(x.data.mean()),
                               lambda g: (np.full(shape, float(g) / n),))


# ------------------------------------------------------------ fused ops

def batched_matvec(w: Tensor, x: Tensor) -> Tensor:
    """Per-row matrix application: ``out[b] = w[b] @ x[b]`` for w (B, o, i), x (B, i)."""
    if w.data.ndim != 3 or x.data.ndim != 2 or w.shape[0] != x.shape[0] \
            or w.shape[2] != x.shape[1]:
        raise DimensionError(f"batched_matvec: incompatible {w.shape} and {x.shape}")
    W, X = w.data, x.data

    def backward(g):
        return g[:, :, None] * X[:, None, :], np.matmul(g[:, None, :], W)[:, 0, :]

    out = np.matmul(W, X[:, :, None])[:, :, 0]
    return _graph_of(w, x).record("batched_matvec", (w, x), out, backward)


def _scatter_columns(n_cols: int, ids: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum ``rows`` (m, D) into a (D, n_cols) array at column positions ``ids`` (m,)."""
    D = rows.shape[1]
    out = np.empty((D, n_cols))
    for d in range(D):
        out[d] = np.bincount(ids, weights=rows[:, d], minlength=n_cols)
    return out


def gather_columns(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup. ``table`` is (D, N); ``ids`` (B, k) -> (B, k*D).

    Row ``b`` holds the columns for ``ids[b, 0], ..., ids[b, k-1]`` laid end to end.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"gather_columns: ids must be (B, k), got {ids.shape}")
    D, N = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= N):
        raise DimensionError("gather_columns: id out of table range")
    B, k = ids.shape
    out = table.data.T[ids].reshape(B, k * D)
    flat = ids.reshape(-1)

    def backward(g):
        return (_scatter_columns(N, flat, g.reshape(B * k, D)),)

    return _graph_of(table).record("gather", (table,), out, backward)


def pooled_lookup(table: Tensor, ids: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted pooling of looked-up embeddings.

    ``ids`` (B, L, k) indexes columns of ``table`` (D, N); ``weights`` (B, L).
    Returns (B, k*D) with ``out[b] = sum_l weights[b, l] * concat_k E[:, ids[b, l, k]]``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    if ids.ndim != 3 or weights.shape != ids.shape[:2]:
        raise DimensionError(f"pooled_lookup: ids {ids.shape} vs weights {weights.shape}")
    D, N = table.shape
    B, L, k = ids.shape
    if L == 0:
        out = np.zeros((B, k * D))
        return _graph_of(table).record("pooled_lookup", (table,), out,
                                       lambda g: (np.zeros((D, N)),))
    emb = table.data.T[ids]  # (B, L, k, D)
    out = np.einsum("blkd,bl->bkd", emb, weights).reshape(B, k * D)
    flat = ids.reshape(-1)

    def backward(g):
        rows = weights[:, :, None, None] * g.reshape(B, 1, k, D)
        return (_scatter_columns(N, flat, rows.reshape(B * L * k, D)),)

    return _graph_of(table).record("pooled_lookup", (table,), out, backward)


# ------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor) -> dict:
    """Reverse sweep from a scalar ``loss``; returns ``{param name: grad}``.

    Gradients are also left on each tensor's ``grad`` attribute.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.graph is not graph:
        raise UsageError("loss does not belong to this graph")
    for node in graph.nodes:
        node.output.grad = None
    for p in graph.parameters.values():
        p.grad = None
    loss.grad = np.ones(loss.shape)
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None or node.backward is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                # gradients are never modified in place, so sharing is safe
                inp.grad = gi
            else:
                inp.grad = inp.grad + gi
    return {name: (p.grad if p.grad is not None else np.zeros(p.shape))
            for name, p in graph.parameters.items()}


# ------------------------------------------------------- gradient check

LossBuilder = Callable[[Graph, dict], Tensor]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[tuple]
    per_param: dict

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _evaluate(build: LossBuilder, params: dict, grad_enabled: bool):
    g = Graph(grad_enabled=grad_enabled)
    leaves = {name: g.parameter(name, value) for name, value in params.items()}
    loss = build(g, leaves)
    return g, loss


def grad_check(build: LossBuilder, params: dict, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences for every entry.

    ``build(graph, leaves)`` must construct a scalar loss from the leaf tensors
    ``leaves[name]`` registered on ``graph``; it is re-run for each probe, so it
    must be free of side effects. The error per entry is
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise NumericError(f"parameter {name!r} is not finite")
    graph, loss = _evaluate(build, params, grad_enabled=True)
    analytic = backward(graph, loss)

    worst, worst_name, worst_idx = 0.0, None, None
    per_param = {}
    for name, value in params.items():
        err_max = 0.0
        ga_all = analytic[name]
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            losses = []
            for sign in (1.0, -1.0):
                value[idx] = orig + sign * eps
                try:
                    _, l = _evaluate(build, params, grad_enabled=False)
                    lv = float(l.data)
                except NumericError as exc:
                    raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}") from exc
                if not np.isfinite(lv):
                    raise NumericError(f"non-finite loss when perturbing {name}{list(idx)}")
                losses.append(lv)
            value[idx] = orig
            gn = (losses[0] - losses[1]) / (2.0 * eps)
            ga = float(ga_all[idx])
            err = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
            if err > err_max:
                err_max = err
            if err > worst:
                worst, worst_name, worst_idx = err, name, idx
        per_param[name] = err_max
    return GradCheckReport(worst, worst_name, worst_idx, per_param)
