"""Small define-by-run reverse-mode autodiff over dense numpy arrays.

Only the operations the segmentation network needs are provided. There is no
general broadcasting: every op documents the shapes it accepts.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_counter = itertools.count()


class DimensionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (gradient checks run in float64)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A dense array plus the record needed to backpropagate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar; leaf gradients accumulate across calls."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    # creation order is a valid topological order for a define-by-run graph
    nodes.sort(key=lambda t: t._order, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    for x in xs[1:]:
        _check_same(xs[0], x, "add_n")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return _make(out, xs, lambda g: tuple(g for _ in xs))


def mul_n(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = mul(out, x)
    return out


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(dtype=x.data.dtype)).reshape(()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_rows(x: Tensor) -> Tensor:
    """Average over axis 0 of an n x c tensor, giving 1 x c."""
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("mean over zero rows")
    return _make(x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def neighbor_mean(x: Tensor) -> Tensor:
    """Unweighted mean over the neighbor axis of an n x k x c tensor."""
    k = x.shape[1]
    return _make(x.data.mean(axis=1), (x,),
                 lambda g: (np.repeat(g[:, None, :] / k, k, axis=1),))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of an n x c tensor (n values). Zero rows get zero gradient."""
    norms = np.sqrt((x.data * x.data).sum(axis=1))

    def back(g):
        safe = np.where(norms > 0, norms, 1)
        return ((g / safe * (norms > 0))[:, None] * x.data,)

    return _make(norms, (x,), back)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    ndim = xs[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} invalid for rank {ndim}")
    axis = axis % ndim
    for x in xs:
        if x.ndim != ndim or x.shape[:axis] + x.shape[axis + 1:] != xs[0].shape[:axis] + xs[0].shape[axis + 1:]:
            raise DimensionError("concat: incompatible shapes " + str([t.shape for t in xs]))
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def take_column(x: Tensor, j: int) -> Tensor:
    """Column j of an n x c tensor as n x 1."""

    def back(g):
        out = np.zeros_like(x.data)
        out[:, j:j + 1] = g
        return (out,)

    return _make(x.data[:, j:j + 1].copy(), (x,), back)


# ---------------------------------------------------------------- layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Shared per-point affine map over the last axis; any leading dims (1x1 convolution)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(lead + (w.shape[1],)), parents, back)


def batch_norm(x: Tensor, state, training: bool) -> Tensor:
    """Normalize the last axis using statistics over every leading position.

    ``state`` carries ``gamma``/``beta`` tensors, ``running_mean``/``running_var``
    arrays, ``momentum`` and ``eps``. When ``state.cumulative_count`` is an int the
    running statistics become an exact average over calls instead of an EMA.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if m == 0:
        raise EmptyInputError("batch_norm on empty input")
    gamma, beta = state.gamma, state.beta
    dt = x.data.dtype

    if not training:
        inv = 1.0 / np.sqrt(state.running_var.astype(dt) + dt.type(state.eps))
        xhat = (x2 - state.running_mean.astype(dt)) * inv
        out = xhat * gamma.data + beta.data

        def back_eval(g):
            g2 = g.reshape(-1, c)
            return ((g2 * gamma.data * inv).reshape(x.shape),
                    (g2 * xhat).sum(axis=0), g2.sum(axis=0))

        return _make(out.reshape(x.shape), (x, gamma, beta), back_eval)

    mean = x2.mean(axis=0)
    xc = x2 - mean
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    count = getattr(state, "cumulative_count", None)
    if count is not None:
        state.cumulative_count = count + 1
        mom = count / (count + 1)
    else:
        mom = state.momentum
    state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
    state.running_var = (mom * state.running_var + (1 - mom) * var).astype(state.running_var.dtype)

    def back(g):
        g2 = g.reshape(-1, c)
        gbeta = g2.sum(axis=0)
        ggamma = (g2 * xhat).sum(axis=0)
        gxhat = g2 * gamma.data
        gx = inv / m * (m * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx.reshape(x.shape), ggamma, gbeta

    return _make(out.reshape(x.shape), (x, gamma, beta), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- neighborhoods


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of g (idx.size x c) into n rows by index; deterministic order."""
    c = g.shape[-1]
    flat = idx.reshape(-1)
    g2 = g.reshape(-1, c)
    out = np.zeros((n, c), dtype=g.dtype)
    np.add.at(out, flat, g2)
    return out


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: out[i] = x[idx[i]]; idx may have any shape, output is idx.shape + (c,)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    return _make(x.data[idx], (x,), lambda g: (_scatter_rows(g, idx, n).reshape(x.shape),))


def neighbor_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """n x c features gathered by an n x k neighbor index into n x k x c."""
    idx = np.asarray(idx)
    if idx.ndim != 2:
        raise DimensionError(f"neighbor index must be 2-D, got {idx.shape}")
    if x.ndim != 2:
        raise DimensionError(f"neighbor_gather expects n x c input, got {x.shape}")
    return take_rows(x, idx)


def neighbor_max(x: Tensor) -> Tensor:
    """Max over the neighbor axis; gradient goes to the first maximal slot."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"neighbor_max expects n x k x c with k >= 1, got {x.shape}")
    arg = x.data.argmax(axis=1)  # argmax returns the lowest index on ties
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return _make(out, (x,), back)


def neighbor_weighted_mean(x: Tensor, scores: Tensor) -> Tensor:
    """Softmax over neighbors of per-channel scores, then the weighted sum of x."""
    if x.shape != scores.shape or x.ndim != 3:
        raise DimensionError(f"neighbor_weighted_mean: shapes {x.shape} and {scores.shape}")
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    out = (w * x.data).sum(axis=1)

    def back(g):
        gx = w * g[:, None, :]
        gw = x.data * g[:, None, :]
        gs = w * (gw - (gw * w).sum(axis=1, keepdims=True))
        return gx, gs

    return _make(out, (x, scores), back)


def weighted_maps(maps: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_m weights[:, m] * maps[m] for M maps of shape n x c and n x M weights."""
    n, c = maps[0].shape
    if weights.shape != (n, len(maps)):
        raise DimensionError(f"weights shape {weights.shape} != ({n}, {len(maps)})")
    for mp in maps:
        if mp.shape != (n, c):
            raise DimensionError("weighted_maps: mismatched map shapes")
    out = np.zeros((n, c), dtype=maps[0].data.dtype)
    for m, mp in enumerate(maps):
        out += weights.data[:, m:m + 1] * mp.data

    def back(g):
        gmaps = [weights.data[:, m:m + 1] * g for m in range(len(maps))]
        gw = np.stack([(g * mp.data).sum(axis=1) for mp in maps], axis=1)
        return (*gmaps, gw)

    return _make(out, (*maps, weights), back)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of the true class over non-ignored rows."""
    labels = np.asarray(labels, dtype=np.int64)
    n, q = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    keep = np.ones(n, dtype=bool) if ignore_id is None else labels != ignore_id
    count = int(keep.sum())
    if count == 0:
        raise UndefinedLossError("every point is ignored")
    if labels[keep].min() < 0 or labels[keep].max() >= q:
        raise ValueError(f"labels outside [0, {q})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = logsum[rows] - z[rows, labels[rows]]
    loss = np.asarray(nll.sum() / count, dtype=logits.data.dtype)

    def back(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels[rows]] -= 1
        p[~keep] = 0
        return (p * (g / count),)

    return _make(loss, (logits,), back)
