"""Dense float64 matrices with a recording tape for reverse-mode gradients.

A :class:`Tape` owns the computation record.  Leaves are created with
``tape.variable(array)``; every primitive below checks whether one of its
inputs lives on a tape and, if so, appends itself to that tape together with a
closure that maps the output gradient to input gradients.  Inputs that are not
on a tape are treated as constants.

    tape = Tape()
    w = tape.variable(np.ones((3, 2)))
    loss = total(relu(matmul(x, w)))
    grads = tape.backward(loss)
    grads[w.node_id]
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

AGG_KINDS = ("sum", "mean", "max")


class Tensor:
    """Immutable 2-D float64 matrix, optionally attached to a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tracked = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor({self.rows}x{self.cols}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of applied primitives.

    Operations are appended as they execute, so the list is topologically
    sorted by construction.  Backward walks it in reverse and accumulates
    gradients in record order, which keeps results bit-reproducible.
    """

    def __init__(self):
        self._ops: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._shapes: list[tuple[int, int]] = []
        self.grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._ops)

    def _new_id(self, shape) -> int:
        self._shapes.append(shape)
        return len(self._shapes) - 1

    def variable(self, data) -> Tensor:
        t = Tensor(data)
        t.tape = self
        t.node_id = self._new_id(t.data.shape)
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        out = Tensor(data)
        out.tape = self
        out.node_id = self._new_id(out.data.shape)
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self._ops.append((out.node_id, ids, backward))
        return out

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        if output.tape is not self:
            raise ContractError("output was not recorded on this tape")
        if output.data.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) output, got {output.shape}")
        grads: dict[int, np.ndarray] = {output.node_id: np.ones((1, 1))}
        for out_id, in_ids, fn in reversed(self._ops):
            g = grads.get(out_id)
            if g is None:
                continue
            for iid, gi in zip(in_ids, fn(g)):
                if iid is None or gi is None:
                    continue
                prev = grads.get(iid)
                grads[iid] = gi if prev is None else prev + gi
        for nid, shape in enumerate(self._shapes):
            if nid not in grads:
                grads[nid] = np.zeros(shape)
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        return self.grads[t.node_id]


def backward(output: Tensor) -> dict[int, np.ndarray]:
    if output.tape is None:
        raise ContractError("output is not recorded on any tape")
    return output.tape.backward(output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("inputs belong to different tapes")
    return tape


def _finish(out: np.ndarray, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, back)


# ---------------------------------------------------------------- arithmetic


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.tape else None, A.T @ g if b.tape else None)

    return _finish(A @ B, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """Row-wise affine map ``x @ w.T + b`` with ``w`` stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.cols != w.cols:
        raise DimensionError(f"linear: input has {x.cols} columns, weight expects {w.cols}")
    X, W = x.data, w.data
    out = X @ W.T
    if b is None:
        return _finish(out, (x, w), lambda g: (g @ W if x.tape else None, g.T @ X if w.tape else None))
    b = as_tensor(b)
    if b.shape != (1, w.rows):
        raise DimensionError(f"linear: bias shape {b.shape}, expected (1, {w.rows})")
    out += b.data

    def back(g):
        return (
            g @ W if x.tape else None,
            g.T @ X if w.tape else None,
            g.sum(axis=0, keepdims=True) if b.tape else None,
        )

    return _finish(out, (x, w, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _finish(a.data.T.copy(), (a,), lambda g: (g.T,))


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def add_rows(a, row) -> Tensor:
    """Add a 1 x d row to every row of an n x d matrix."""
    a, row = as_tensor(a), as_tensor(row)
    if row.shape != (1, a.cols):
        raise DimensionError(f"add_rows: row {row.shape} vs matrix {a.shape}")
    return _finish(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _finish(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _finish(A * B, (a, b), lambda g: (g * B if a.tape else None, g * A if b.tape else None))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient 0 at 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _finish(np.abs(a.data), (a,), lambda g: (g * sign,))


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _finish(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def concat_cols(ts: Iterable) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    if len({t.rows for t in ts}) != 1:
        raise DimensionError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [t.cols for t in ts])
    out = np.concatenate([t.data for t in ts], axis=1)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _finish(out, ts, back)


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _finish(s, (a,), back)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (1, a.cols) or beta.shape != (1, a.cols):
        raise DimensionError("layer_norm: affine parameters must be 1 x d")
    x = a.data
    xc = x - x.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xh = xc * inv
    G = gamma.data

    def back(g):
        gxh = g * G
        dx = inv * (gxh - gxh.mean(axis=1, keepdims=True) - xh * (gxh * xh).mean(axis=1, keepdims=True))
        return (
            dx if a.tape else None,
            (g * xh).sum(axis=0, keepdims=True) if gamma.tape else None,
            g.sum(axis=0, keepdims=True) if beta.tape else None,
        )

    return _finish(xh * G + beta.data, (a, gamma, beta), back)


# ------------------------------------------------------------- aggregation


def _tie_split_mask(vals: np.ndarray, maxima: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Weights routing a max-gradient evenly over tied maximisers of each segment."""
    hit = (vals == maxima).astype(np.float64)
    counts = np.add.reduceat(hit, starts, axis=0)
    seg_len = np.diff(np.append(starts, len(vals)))
    return hit / np.repeat(counts, seg_len, axis=0)


def aggregate(rows, kind: str, dim: int | None = None) -> Tensor:
    """Pointwise aggregate of a multiset of row vectors into a 1 x d row.

    The empty multiset aggregates to the zero vector for every kind.  Sums use
    exactly-rounded accumulation, so the result does not depend on row order.
    """
    if kind not in AGG_KINDS:
        raise ValueError(f"unknown aggregation {kind!r}")
    if not isinstance(rows, Tensor):
        arr = np.asarray(rows, dtype=np.float64)
        if arr.size == 0:
            if dim is None:
                dim = arr.shape[1] if arr.ndim == 2 else 0
            arr = np.zeros((0, dim))
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
        rows = Tensor(arr)
    X = rows.data
    n, d = X.shape
    if n == 0:
        return _finish(np.zeros((1, d)), (rows,), lambda g: (np.zeros((0, d)),))
    if kind == "max":
        m = X.max(axis=0, keepdims=True)
        w = _tie_split_mask(X, m, np.array([0]))
        return _finish(m, (rows,), lambda g: (w * g,))
    s = np.array([[math.fsum(X[:, j]) for j in range(d)]])
    if kind == "sum":
        return _finish(s, (rows,), lambda g: (np.repeat(g, n, axis=0),))
    return _finish(s / n, (rows,), lambda g: (np.repeat(g / n, n, axis=0),))


def segment_reduce(a, offsets: np.ndarray, kind: str) -> Tensor:
    """Aggregate consecutive row blocks ``a[offsets[i]:offsets[i+1]]`` (all non-empty)."""
    a = as_tensor(a)
    offsets = np.asarray(offsets)
    starts = offsets[:-1]
    sizes = np.diff(offsets)
    if a.rows != offsets[-1] or np.any(sizes <= 0):
        raise DimensionError("segment_reduce: offsets do not partition the rows into non-empty blocks")
    X = a.data
    if kind == "sum":
        return _finish(np.add.reduceat(X, starts, axis=0), (a,), lambda g: (np.repeat(g, sizes, axis=0),))
    if kind == "mean":
        out = np.add.reduceat(X, starts, axis=0) / sizes[:, None]
        return _finish(out, (a,), lambda g: (np.repeat(g / sizes[:, None], sizes, axis=0),))
    if kind == "max":
        m = np.maximum.reduceat(X, starts, axis=0)
        w = _tie_split_mask(X, np.repeat(m, sizes, axis=0), starts)
        return _finish(m, (a,), lambda g: (w * np.repeat(g, sizes, axis=0),))
    raise ValueError(f"unknown aggregation {kind!r}")


def segment_broadcast(a, offsets: np.ndarray) -> Tensor:
    """Repeat row i of a (B x d) matrix for every row of segment i."""
    a = as_tensor(a)
    offsets = np.asarray(offsets)
    sizes = np.diff(offsets)
    if a.rows != len(sizes):
        raise DimensionError("segment_broadcast: one row per segment expected")
    starts = offsets[:-1]
    return _finish(np.repeat(a.data, sizes, axis=0), (a,), lambda g: (np.add.reduceat(g, starts, axis=0),))


def sparse_matmul(S, a) -> Tensor:
    """Constant sparse (scipy CSR) matrix times a tensor."""
    a = as_tensor(a)
    if S.shape[1] != a.rows:
        raise DimensionError(f"sparse_matmul {S.shape} x {a.shape}")
    return _finish(np.asarray(S @ a.data), (a,), lambda g: (np.asarray(S.T @ g),))


def neighbor_max(a, indptr: np.ndarray, indices: np.ndarray) -> Tensor:
    """Per-row max over CSR neighbour lists; rows without neighbours give 0."""
    a = as_tensor(a)
    X = a.data
    n_rows = len(indptr) - 1
    out = np.zeros((n_rows, X.shape[1]))
    deg = np.diff(indptr)
    has = np.flatnonzero(deg)
    if len(has) == 0:
        return _finish(out, (a,), lambda g: (np.zeros_like(X),))
    gathered = X[indices]
    starts = indptr[has]
    # reduceat over the compacted neighbour list; starts index into `indices`
    m = np.maximum.reduceat(gathered, starts, axis=0)
    out[has] = m
    w = _tie_split_mask(gathered, np.repeat(m, deg[has], axis=0), starts)

    def back(g):
        gx = np.zeros_like(X)
        np.add.at(gx, indices, w * np.repeat(g[has], deg[has], axis=0))
        return (gx,)

    return _finish(out, (a,), back)


# --------------------------------------------------------------- attention


def _unique_rows(X: np.ndarray):
    u, inv, cnt = np.unique(X, axis=0, return_inverse=True, return_counts=True)
    return u, inv.ravel(), cnt


def _attend_block(Q, K, V, scale_by: float) -> np.ndarray:
    """Inference-only attention for one block.

    Repeated (key, value) rows are merged into one row whose logit is raised
    by log(multiplicity), and repeated queries are evaluated once.  Both are
    exact rewrites of the softmax sum, and they make large graphs with few
    distinct vertex states cheap.
    """
    n, dk = K.shape
    kv, _, cnt = _unique_rows(np.concatenate([K, V], axis=1))
    qs, qinv, _ = _unique_rows(Q)
    Ku, Vu = kv[:, :dk], kv[:, dk:]
    S = qs @ Ku.T
    if scale_by != 1.0:
        S *= scale_by
    if len(cnt) < n:
        S += np.log(cnt)[None, :]
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    num = S @ Vu
    num /= S.sum(axis=1, keepdims=True)
    return num[qinv]


def grouped_attention(q, k, v, offsets: np.ndarray, scale_by: float) -> Tensor:
    """softmax(Q K^T * scale) V computed independently inside each row block.

    Blocks are the graphs of a batch; attention never crosses a block
    boundary.  Equivalent to running the single-graph formula per graph.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    offsets = np.asarray(offsets)
    if q.shape != k.shape or q.rows != v.rows or q.rows != offsets[-1]:
        raise DimensionError("grouped_attention: inconsistent shapes")
    tape = _tape_of(q, k, v)
    sizes = np.diff(offsets)
    B = len(sizes)
    Q, K, V = q.data, k.data, v.data

    if tape is None:
        out = np.empty((Q.shape[0], V.shape[1]))
        for a, b in zip(offsets[:-1], offsets[1:]):
            if b > a:
                out[a:b] = _attend_block(Q[a:b], K[a:b], V[a:b], scale_by)
        return Tensor(out)

    if B == 1:
        S = Q @ K.T
        if scale_by != 1.0:
            S *= scale_by
        S -= S.max(axis=1, keepdims=True)
        np.exp(S, out=S)
        if tape is None:
            num = S @ V
            num /= S.sum(axis=1, keepdims=True)
            return Tensor(num)
        S /= S.sum(axis=1, keepdims=True)
        A = S

        def back1(g):
            dA = g @ V.T
            dS = A * (dA - (dA * A).sum(axis=1, keepdims=True))
            return (
                dS @ K * scale_by if q.tape else None,
                dS.T @ Q * scale_by if k.tape else None,
                A.T @ g if v.tape else None,
            )

        return tape.record(A @ V, (q, k, v), back1)

    nmax = int(sizes.max())
    seg = np.repeat(np.arange(B), sizes)
    loc = np.arange(len(seg)) - offsets[seg]

    def pad(x):
        P = np.zeros((B, nmax, x.shape[1]))
        P[seg, loc] = x
        return P

    Qp, Kp, Vp = pad(Q), pad(K), pad(V)
    S = Qp @ Kp.transpose(0, 2, 1)
    if scale_by != 1.0:
        S *= scale_by
    invalid = np.arange(nmax)[None, None, :] >= sizes[:, None, None]
    S = np.where(invalid, -np.inf, S)
    S -= S.max(axis=2, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=2, keepdims=True)
    A = S
    out = (A @ Vp)[seg, loc]
    if tape is None:
        return Tensor(out)

    def back(g):
        Gp = pad(g)
        dA = Gp @ Vp.transpose(0, 2, 1)
        dS = A * (dA - (dA * A).sum(axis=2, keepdims=True))
        return (
            (dS @ Kp)[seg, loc] * scale_by if q.tape else None,
            (dS.transpose(0, 2, 1) @ Qp)[seg, loc] * scale_by if k.tape else None,
            (A.transpose(0, 2, 1) @ Gp)[seg, loc] if v.tape else None,
        )

    return tape.record(out, (q, k, v), back)
