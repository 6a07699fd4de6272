"""Small dense-tensor reverse-mode differentiation on top of numpy.

A :class:`Tape` records every primitive applied to tensors that (transitively)
depend on one of its leaves.  Records are appended in creation order, so a
reverse walk over the record list is already a valid topological order.

Tensors without a tape are plain constants: operations on them just compute
the forward value and record nothing, which is what evaluation code uses.

Example::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = x * x
    (gx,) = tape.gradient(y, [x])     # -> 6.0
"""
from __future__ import annotations

from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "tape", "index")
    __array_priority__ = 1000  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor({self.data!r}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Ordered record of primitive applications.

    Each record is ``(parents, backward)`` where ``backward`` maps the output
    adjoint to one adjoint per parent (``None`` for parents that are
    constants).
    """

    def __init__(self):
        self._records: list[tuple[tuple[int, ...], Callable | None]] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self):
        return len(self._records)

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, len(self._records))
        self._records.append(((), None))
        self._shapes.append(t.data.shape)
        return t

    def _record(self, value: np.ndarray, parents: Sequence[Tensor | None], backward) -> Tensor:
        ids = tuple(-1 if p is None else p.index for p in parents)
        t = Tensor(value, self, len(self._records))
        self._records.append((ids, backward))
        self._shapes.append(t.data.shape)
        return t

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of the scalar ``output`` with respect to each tensor in ``wrt``.

        Tensors the output does not depend on get a zero gradient.
        """
        if output.tape is None:
            return [np.zeros_like(w.data) for w in wrt]
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.data.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        for w in wrt:
            if w.tape is not self:
                raise ValueError("gradient requested for a tensor not on this tape")

        keep = {w.index for w in wrt}
        adj: list[np.ndarray | None] = [None] * (output.index + 1)
        adj[output.index] = np.ones_like(output.data)
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            parents, backward = self._records[i]
            if backward is None:
                continue
            grads = backward(g)
            for pid, pg in zip(parents, grads):
                if pid < 0 or pg is None:
                    continue
                if adj[pid] is None:
                    adj[pid] = pg
                else:
                    adj[pid] = adj[pid] + pg
            if i not in keep:
                adj[i] = None
        out = []
        for w in wrt:
            g = adj[w.index] if w.index < len(adj) else None
            out.append(np.zeros_like(w.data) if g is None else np.asarray(g, dtype=np.float64).reshape(w.shape))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    """Forward value of a tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _emit(value, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    parents = [x if x.tape is not None else None for x in inputs]
    return tape._record(value, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    sx, sy = x.shape, y.shape
    return _emit(x.data + y.data, (x, y), lambda g: (_unbroadcast(g, sx), _unbroadcast(g, sy)))


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    sx, sy = x.shape, y.shape
    return _emit(x.data - y.data, (x, y), lambda g: (_unbroadcast(g, sx), _unbroadcast(-g, sy)))


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    xd, yd = x.data, y.data

    def backward(g):
        gx = _unbroadcast(g * yd, xd.shape) if x.tape is not None else None
        gy = _unbroadcast(g * xd, yd.shape) if y.tape is not None else None
        return gx, gy

    return _emit(xd * yd, (x, y), backward)


def div(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    xd, yd = x.data, y.data
    out = xd / yd

    def backward(g):
        gq = g / yd
        gx = _unbroadcast(gq, xd.shape) if x.tape is not None else None
        gy = _unbroadcast(-gq * out, yd.shape) if y.tape is not None else None
        return gx, gy

    return _emit(out, (x, y), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


_relu_probe: list | None = None


@contextmanager
def relu_patterns() -> Iterator[list]:
    """Collect the sign pattern (x > 0) of every ReLU evaluated inside the block.

    Finite-difference checks use this to notice a stencil that straddles a kink.
    """
    global _relu_probe
    outer, _relu_probe = _relu_probe, []
    try:
        yield _relu_probe
    finally:
        _relu_probe = outer


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    if _relu_probe is not None:
        _relu_probe.append(x.data > 0)
    # subgradient 0 at exactly 0
    return _emit(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log1p(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis), 1.0 / n)


def matmul(x, w) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., n) and a 2-D ``w`` of shape (n, m)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.tape is not None else None
        gw = x2.T @ g2 if w.tape is not None else None
        return gx, gw

    return _emit((x2 @ wd).reshape(lead + (wd.shape[1],)), (x, w), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _emit(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def expand_dims(x, axis: int) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take(x, key) -> Tensor:
    """Basic slicing ``x[key]``; adjoint scatters into zeros."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _emit(x.data[key], (x,), backward)


def diagonal(x) -> Tensor:
    """Gather ``x[..., k, k]`` from an array whose last two axes are (K, K)."""
    x = as_tensor(x)
    shape = x.shape
    k = shape[-1]
    if shape[-2] != k:
        raise ValueError(f"diagonal needs a square trailing (K, K) pair, got {shape}")
    idx = np.arange(k)

    def backward(g):
        out = np.zeros(shape)
        out[..., idx, idx] = g
        return (out,)

    return _emit(x.data[..., idx, idx], (x,), backward)


def affine(w, x, b=None) -> Tensor:
    """Feature-first affine map ``w @ x + b``.

    ``x`` is (f_in, ...), ``w`` is (f_out, f_in), ``b`` is (f_out,); the
    result is (f_out, ...).
    """
    w, x = as_tensor(w), as_tensor(x)
    b = None if b is None else as_tensor(b)
    if w.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ValueError(f"affine shape mismatch: {w.shape} @ {x.shape}")
    wd, xd = w.data, x.data
    rest = xd.shape[1:]
    x2 = xd.reshape(xd.shape[0], -1)
    out = wd @ x2
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        g2 = g.reshape(wd.shape[0], -1)
        gw = g2 @ x2.T if w.tape is not None else None
        gx = (wd.T @ g2).reshape(xd.shape) if x.tape is not None else None
        if b is None:
            return gw, gx
        gb = g2.sum(axis=1) if b.tape is not None else None
        return gw, gx, gb

    inputs = (w, x) if b is None else (w, x, b)
    return _emit(out.reshape((wd.shape[0],) + rest), inputs, backward)


def affine_relu(w, x, b) -> Tensor:
    """``relu(affine(w, x, b))`` in one pass, without the intermediate array."""
    w, x, b = as_tensor(w), as_tensor(x), as_tensor(b)
    if w.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ValueError(f"affine shape mismatch: {w.shape} @ {x.shape}")
    wd, xd = w.data, x.data
    x2 = xd.reshape(xd.shape[0], -1)
    out = wd @ x2
    out += b.data[:, None]
    np.maximum(out, 0.0, out=out)
    if _relu_probe is not None:
        _relu_probe.append((out > 0).reshape((wd.shape[0],) + xd.shape[1:]))

    def backward(g):
        g2 = g.reshape(wd.shape[0], -1) * (out > 0)
        gw = g2 @ x2.T if w.tape is not None else None
        gx = (wd.T @ g2).reshape(xd.shape) if x.tape is not None else None
        gb = g2.sum(axis=1) if b.tape is not None else None
        return gw, gx, gb

    return _emit(out.reshape((wd.shape[0],) + xd.shape[1:]), (w, x, b), backward)


def mean_over_set(x, index_sets: Sequence[Sequence[int]], axis: int = 0) -> Tensor:
    """``out[i] = mean(x[s] for s in index_sets[i])`` along ``axis``.

    An empty index set yields zeros.  Gradient: ``1/|S_i|`` to each member.
    """
    x = as_tensor(x)
    n = x.shape[axis]
    A = np.zeros((len(index_sets), n))
    for i, s in enumerate(index_sets):
        s = np.asarray(s, dtype=int)
        if s.size:
            np.add.at(A[i], s, 1.0 / s.size)
    xm = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(xm @ A.T, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1) @ A
        return (np.moveaxis(gm, -1, axis),)

    return _emit(out, (x,), backward)


def category_mean(g) -> Tensor:
    """Relation-category pooling over the two trailing UE axes.

    ``g`` is feature-first, shape (f, ..., K, K) with ``f`` divisible by 4;
    feature block c (``c*f/4 : (c+1)*f/4``) belongs to category c + 1.  For
    output position (k, j), block c is averaged over the positions (k', j')
    in its category relative to (k, j):

      1: (k, j) itself
      2: same row k, other column (K-1 positions)
      3: same column j, other row (K-1 positions)
      4: neither, (K-1)^2 positions

    Empty categories (K = 1) contribute zeros.  The operator is symmetric, so
    the adjoint applies the same pooling to the incoming gradient.
    """
    g = as_tensor(g)
    if g.shape[0] % 4:
        raise ValueError(f"feature dim {g.shape[0]} is not a multiple of 4")
    return _emit(_category_pool(g.data), (g,), lambda adj: (_category_pool(adj),))


_DENSE_POOL_MAX_K = 8


@lru_cache(maxsize=None)
def _pool_matrices(K: int) -> np.ndarray:
    """Transposed averaging matrices (4, K*K, K*K) for the dense pooling path."""
    k, j = np.divmod(np.arange(K * K), K)
    same_row = k[:, None] == k[None, :]
    same_col = j[:, None] == j[None, :]
    masks = [same_row & same_col, same_row & ~same_col, ~same_row & same_col, ~same_row & ~same_col]
    A = np.stack([m.astype(np.float64) for m in masks])
    counts = A.sum(axis=-1, keepdims=True)
    A = np.divide(A, counts, out=np.zeros_like(A), where=counts > 0)
    return np.ascontiguousarray(np.swapaxes(A, 1, 2))


def _category_pool(G: np.ndarray) -> np.ndarray:
    K = G.shape[-1]
    shape = G.shape
    if K == 1:
        out = np.zeros_like(G)
        q = shape[0] // 4
        out[:q] = G[:q]
        return out
    if K <= _DENSE_POOL_MAX_K:
        g = G.reshape(4, -1, K * K)
        return np.matmul(g, _pool_matrices(K)).reshape(shape)
    # larger K: each category is a product with A = (ones - I)/(K-1) on the row
    # axis, the column axis, or both
    G = G.reshape((4, -1, K, K))
    n = G.shape[1]
    A = _off_diagonal_mean(K)
    out = np.empty_like(G)
    out[0] = G[0]
    np.matmul(G[1].reshape(-1, K), A, out=out[1].reshape(-1, K))
    np.matmul(A, G[2], out=out[2])
    np.matmul(A, (G[3].reshape(-1, K) @ A).reshape(n, K, K), out=out[3])
    return out.reshape(shape)


@lru_cache(maxsize=None)
def _off_diagonal_mean(K: int) -> np.ndarray:
    return (np.ones((K, K)) - np.eye(K)) / (K - 1)


def neighbor_mean(x, axis: int) -> Tensor:
    """Mean over all *other* entries along ``axis`` (complete graph, no self loop).

    With a single entry the neighbourhood is empty and the result is zero.
    Symmetric operator: adjoint is the same map.
    """
    x = as_tensor(x)
    return _emit(_neighbor_pool(x.data, axis), (x,), lambda g: (_neighbor_pool(g, axis),))


def _neighbor_pool(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    if n == 1:
        return np.zeros_like(x)
    return (x.sum(axis=axis, keepdims=True) - x) / (n - 1)
