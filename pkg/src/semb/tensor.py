"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the sequence encoder and the metric-learning
losses are provided.  There is no implicit broadcasting: binary operations
require identical shapes, and the only mixed-shape operations are explicit
(``scale``, ``add_scalar``, ``affine``).

A graph is recorded only when at least one input requires gradients, so the
same functions serve as a cheap inference path.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_checked: ContextVar[bool] = ContextVar("semb_checked", default=False)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation (empty, zero-norm...)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while checked mode was active."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (detached loss, double backward)."""


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NonFiniteError` whenever an op produces NaN/Inf."""
    token = _checked.set(enabled)
    try:
        yield
    finally:
        _checked.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _checked.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w`` plus the bias vector ``b`` added to every row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match {w.shape}")
    xv, wv = x.data, w.data

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _result(xv @ wv + b.data, (x, w, b), backward, "affine")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def add_scalar(x, value: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data + float(value), (x,), lambda g: (g,), "add_scalar")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "scale": scale,
    "relu": relu,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# --------------------------------------------------------------------------
# structural


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("stack of an empty sequence")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    data = np.stack([t.data for t in tensors])
    return _result(data, tuple(tensors), lambda g: tuple(g), "stack")


def concat(*tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors of equal rank along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DomainError("concat of nothing")
    rank = tensors[0].data.ndim
    if rank == 0 or any(t.data.ndim != rank for t in tensors):
        raise ShapeError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


def slice_axis(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward, "slice")


def take_rows(x, rows) -> Tensor:
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _result(x.data[rows], (x,), backward, "take_rows")


def gather(x, rows, cols) -> Tensor:
    """Vector of ``x[rows[k], cols[k]]``."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather expects a matrix, got {x.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _result(x.data[rows, cols], (x,), backward, "gather")


# --------------------------------------------------------------------------
# reductions


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_over_time(x) -> Tensor:
    """Arithmetic mean over the leading (time) axis."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[0] == 0:
        raise DomainError("mean_over_time of an empty sequence")
    steps = x.shape[0]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g / steps, shape).copy(),)

    return _result(x.data.sum(axis=0) / steps, (x,), backward, "mean_over_time")


def logsumexp_rows(x) -> Tensor:
    """Row-wise log(sum(exp(x))) with max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"logsumexp_rows expects a non-empty matrix, got {x.shape}")
    top = x.data.max(axis=1, keepdims=True)
    shifted = np.exp(x.data - top)
    total = shifted.sum(axis=1, keepdims=True)
    out = (top + np.log(total))[:, 0]
    soft = shifted / total
    return _result(out, (x,), lambda g: (soft * g[:, None],), "logsumexp_rows")


# --------------------------------------------------------------------------
# metric operations


def l2_normalize(x, eps: float = EPS) -> Tensor:
    """Scale ``x`` (or each row of a matrix) to unit Euclidean norm."""
    x = as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize expects a vector or matrix, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DomainError("l2_normalize: input norm is numerically zero")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), backward, "l2_normalize")


def pairwise_sq_euclidean(a, b) -> Tensor:
    """Matrix of squared Euclidean distances between rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_euclidean: incompatible {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = (diff * diff).sum(axis=-1)

    def backward(g):
        weighted = g[:, :, None] * diff
        return 2.0 * weighted.sum(axis=1), -2.0 * weighted.sum(axis=0)

    return _result(dist, (a, b), backward, "pairwise_sq_euclidean")


def pairwise_cosine_distance(a, b, eps: float = EPS) -> Tensor:
    """Matrix of ``1 - cos(a_i, b_j)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine_distance: incompatible {a.shape} and {b.shape}")
    sim = matmul(l2_normalize(a, eps), transpose(l2_normalize(b, eps)))
    return add_scalar(scale(sim, -1.0), 1.0)


def cosine_distance(a, b, eps: float = EPS) -> Tensor:
    """``1 - a.b / (|a| |b|)`` for two vectors; lies in [0, 2]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_distance: incompatible {a.shape} and {b.shape}")
    av, bv = a.data, b.data
    na = np.sqrt(av @ av)
    nb = np.sqrt(bv @ bv)
    if na <= eps or nb <= eps:
        raise DomainError("cosine_distance: zero-norm operand")
    cos = (av @ bv) / (na * nb)

    def backward(g):
        da = bv / (na * nb) - cos * av / (na * na)
        db = av / (na * nb) - cos * bv / (nb * nb)
        return -g * da, -g * db

    return _result(np.asarray(1.0 - cos), (a, b), backward, "cosine_distance")


# --------------------------------------------------------------------------
# backpropagation


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaves must have no gradient beforehand; call :func:`zero_grad` between
    passes.  Gradients of intermediate nodes are not retained.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no leaf requiring gradients is reachable")
    order = _topological_order(loss)
    leaves = [node for node in order if node.is_leaf]
    if any(leaf.grad is not None for leaf in leaves):
        raise GraphError("gradients already populated; call zero_grad before another backward")
    for leaf in leaves:
        leaf.grad = np.zeros(leaf.shape)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad += g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
