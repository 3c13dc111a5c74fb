"""Featured graphs, the synthetic graph families, targets and the dataset text format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, ParseError

E9 = math.exp(9.0)
E12 = math.exp(12.0)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by a seed and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(eq=False)
class FeaturedGraph:
    """Undirected simple graph on vertices 0..n-1 with an n x p feature matrix.

    Edges are normalised to ``u < v`` and sorted lexicographically, so two
    graphs built from the same edge set in different orders are identical.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.n = int(self.n)
        if self.n < 0:
            raise ParameterError("vertex count must be non-negative")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise ParameterError(f"edge endpoint outside [0, {self.n})")
            if np.any(e[:, 0] == e[:, 1]):
                raise ParameterError("self-loops are not allowed")
            e = np.sort(e, axis=1)
            e = e[np.lexsort((e[:, 1], e[:, 0]))]
            if np.any(np.all(e[1:] == e[:-1], axis=1)):
                raise ParameterError("duplicate edge")
        self.edges = e
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f.reshape(self.n, -1) if self.n else f.reshape(0, 0)
        if f.shape[0] != self.n:
            raise ParameterError(f"feature matrix has {f.shape[0]} rows for {self.n} vertices")
        self.features = f

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        return _adjacency(self.n, self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edges.ravel(), 1)
        return deg

    def neighbors(self, v: int) -> np.ndarray:
        A = self.adjacency
        return A.indices[A.indptr[v]:A.indptr[v + 1]]

    def with_features(self, features) -> "FeaturedGraph":
        return FeaturedGraph(self.n, self.edges, features)

    def permuted(self, perm: Sequence[int]) -> "FeaturedGraph":
        """Relabel vertex v as perm[v]."""
        perm = np.asarray(perm, dtype=np.int64)
        feats = np.empty_like(self.features)
        feats[perm] = self.features
        return FeaturedGraph(self.n, perm[self.edges], feats)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeaturedGraph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    def __repr__(self) -> str:
        return f"FeaturedGraph(n={self.n}, m={self.m}, p={self.p})"


def _adjacency(n: int, edges: np.ndarray) -> sp.csr_matrix:
    if len(edges) == 0:
        return sp.csr_matrix((n, n))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A.sort_indices()
    return A


class GraphBatch:
    """Disjoint union of graphs, vertices stored block by block.

    ``offsets[i]:offsets[i+1]`` are the rows of graph i.  Sparse operators are
    built lazily; neighbour lists are sorted by vertex index so that every
    aggregation runs in a fixed ascending order.
    """

    def __init__(self, graphs: Sequence[FeaturedGraph], features: np.ndarray | None = None):
        if not graphs:
            raise ParameterError("empty batch")
        self.graphs = list(graphs)
        sizes = np.array([g.n for g in graphs], dtype=np.int64)
        if np.any(sizes < 1):
            raise ParameterError("graphs in a batch need at least one vertex")
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_total = int(self.offsets[-1])
        self.x = features if features is not None else np.vstack([g.features for g in graphs])
        parts = [g.edges + off for g, off in zip(graphs, self.offsets[:-1]) if g.m]
        self.edges = np.vstack(parts) if parts else np.zeros((0, 2), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.graphs)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        return _adjacency(self.n_total, self.edges)

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.float64)

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        inv = np.divide(1.0, self.degree, out=np.zeros(self.n_total), where=self.degree > 0)
        M = sp.diags(inv) @ self.adjacency
        M = sp.csr_matrix(M)
        M.sort_indices()
        return M

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        d = 1.0 / np.sqrt(self.degree + 1.0)
        Ahat = self.adjacency + sp.identity(self.n_total, format="csr")
        M = sp.csr_matrix(sp.diags(d) @ Ahat @ sp.diags(d))
        M.sort_indices()
        return M


def as_batch(g) -> GraphBatch:
    return g if isinstance(g, GraphBatch) else GraphBatch([g])


# ------------------------------------------------------------------ families


def _pairs_to_edges(n: int, k: np.ndarray) -> np.ndarray:
    """Map linear indices into the strict upper triangle (row-major) to (u, v)."""
    i_arr = np.arange(n, dtype=np.int64)
    starts = i_arr * n - i_arr * (i_arr + 1) // 2
    u = np.searchsorted(starts, k, side="right") - 1
    v = k - starts[u] + u + 1
    return np.stack([u, v], axis=1)


def sample_er_edges(n: int, mean_degree: float, rng: np.random.Generator) -> np.ndarray:
    if n <= 1:
        return np.zeros((0, 2), dtype=np.int64)
    if mean_degree < 0 or mean_degree > n - 1:
        raise ParameterError(f"mean degree {mean_degree} outside [0, {n - 1}] for n={n}")
    p = mean_degree / (n - 1)
    npairs = n * (n - 1) // 2
    k = np.flatnonzero(rng.random(npairs) < p)
    return _pairs_to_edges(n, k)


def gen_erdos_renyi(n: int, mean_degree: float, seed) -> FeaturedGraph:
    """G(n, p) with p = mean_degree / (n - 1) and constant feature 1.

    ``seed`` is an int or a numpy Generator.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return FeaturedGraph(n, sample_er_edges(n, mean_degree, rng), np.ones((n, 1)))


def make_gn(n: int, encoder: str | None = None, dim: int = 8) -> FeaturedGraph:
    """Edgeless graph on n vertices, featured by a positional encoding or constant 1."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    g = FeaturedGraph(n, np.zeros((0, 2)), np.ones((n, 1)))
    if encoder in (None, "none"):
        return g
    from .encodings import encode

    return g.with_features(encode(g, encoder, dim))


@dataclass(frozen=True)
class ERMode:
    """Erdős–Rényi edges for G_{l,r}; mean degree is clipped to n - 1 on tiny graphs."""

    seed: int
    mean_degree: float


def make_glr(l: int, r: int, edge_mode: str | ERMode = "empty") -> FeaturedGraph:
    if l < 1 or r < 1:
        raise ParameterError("l and r must be >= 1")
    n = l + l * r
    feats = np.empty((n, 2))
    feats[:, 0] = 2.0
    feats[:l, 1] = 1.0
    feats[l:, 1] = 2.0
    if edge_mode == "empty":
        edges = np.zeros((0, 2))
    elif isinstance(edge_mode, ERMode):
        edges = sample_er_edges(n, min(edge_mode.mean_degree, n - 1), make_rng(edge_mode.seed))
    else:
        raise ParameterError(f"unknown edge mode {edge_mode!r}")
    return FeaturedGraph(n, edges, feats)


def target_square(g: FeaturedGraph) -> float:
    return float(g.n) ** 2


def target_h(l: int, r: int) -> float:
    """h(G_{l,r}) via the cancellation-free form l(2 + 1/(1+re^9) + 2r + r/(1+re^12))."""
    if l < 1 or r < 1:
        raise ParameterError("l and r must be >= 1")
    return l * (2.0 + 1.0 / (1.0 + r * E9) + 2.0 * r + r / (1.0 + r * E12))


def head_values(r: int) -> tuple[float, float]:
    """Closed-form attention outputs at u- and w-vertices of G_{l,r}."""
    return 2.0 + 1.0 / (1.0 + r * E9), 2.0 + 1.0 / (1.0 + r * E12)


# ------------------------------------------------------------------ datasets


@dataclass(eq=False)
class Dataset:
    graphs: list[FeaturedGraph]
    targets: list[np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.targets = [np.atleast_1d(np.asarray(t, dtype=np.float64)) for t in self.targets]
        if len(self.graphs) != len(self.targets):
            raise ParameterError("graphs and targets differ in length")
        for t in self.targets:
            if not np.all(np.isfinite(t)):
                raise ParameterError("non-finite target")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self):
        return iter(zip(self.graphs, self.targets))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.graphs, other.graphs))
            and all(np.array_equal(a, b) for a, b in zip(self.targets, other.targets))
        )


def _uniform_int(rng, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def square_dataset(count: int, seed: int, n_range=(10, 50), degree_range=(1.0, 5.0)) -> Dataset:
    """ER graphs with n uniform in n_range, mean degree uniform in degree_range, target n^2."""
    graphs, targets = [], []
    for i in range(count):
        rng = make_rng(seed, i)
        n = _uniform_int(rng, *n_range)
        deg = min(float(rng.uniform(*degree_range)), n - 1)
        g = gen_erdos_renyi(n, deg, rng)
        graphs.append(g)
        targets.append([target_square(g)])
    prov = {"generator": "square", "seed": seed, "count": count,
            "n_range": list(n_range), "degree_range": list(degree_range)}
    return Dataset(graphs, targets, prov)


def hlr_dataset(count: int, seed: int, l_range=(1, 10), r_range=(1, 5),
                degree_range=(1.0, 5.0), edges: str = "erdos_renyi") -> Dataset:
    """G_{l,r} graphs with l, r uniform integers in the given ranges, target h."""
    graphs, targets = [], []
    for i in range(count):
        rng = make_rng(seed, i)
        l = _uniform_int(rng, *l_range)
        r = _uniform_int(rng, *r_range)
        if edges == "erdos_renyi":
            deg = float(rng.uniform(*degree_range))
            mode = ERMode(int(rng.integers(0, 2**63 - 1)), deg)
        else:
            mode = "empty"
        graphs.append(make_glr(l, r, mode))
        targets.append([target_h(l, r)])
    prov = {"generator": "hlr", "seed": seed, "count": count, "l_range": list(l_range),
            "r_range": list(r_range), "degree_range": list(degree_range), "edges": edges}
    return Dataset(graphs, targets, prov)


GENERATORS: dict[str, Callable[..., Dataset]] = {"square": square_dataset, "hlr": hlr_dataset}


def regenerate(provenance: dict) -> Dataset:
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in provenance.items() if k != "generator"}
    return GENERATORS[provenance["generator"]](**kw)


# ---------------------------------------------------------------- text format


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, path) -> None:
    lines = ["# gtlab dataset", "# provenance " + json.dumps(ds.provenance, sort_keys=True)]
    for g, t in ds:
        lines.append(f"G {g.n} {g.m} {g.p}")
        lines.extend(f"{u} {v}" for u, v in g.edges)
        lines.extend(" ".join(_fmt(x) for x in row) for row in g.features)
        lines.append(f"T {len(t)} " + " ".join(_fmt(x) for x in t))
    Path(path).write_text("\n".join(lines) + "\n")


def _ints(tokens, lineno, count):
    if len(tokens) != count:
        raise ParseError(f"expected {count} integers, got {len(tokens)}", lineno)
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None


def _reals(tokens, lineno, count):
    if len(tokens) != count:
        raise ParseError(f"expected {count} reals, got {len(tokens)}", lineno)
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None


def read_dataset(path) -> Dataset:
    provenance: dict = {}
    body: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        s = raw.strip()
        if s.startswith("#"):
            if s.startswith("# provenance "):
                try:
                    provenance = json.loads(s[len("# provenance "):])
                except json.JSONDecodeError as exc:
                    raise ParseError(f"bad provenance: {exc}", lineno) from None
            continue
        if not s and not body:
            continue
        body.append((lineno, s.split()))

    graphs, targets = [], []
    i = 0
    while i < len(body):
        lineno, tok = body[i]
        if not tok:
            i += 1
            continue
        if tok[0] != "G":
            raise ParseError(f"expected graph header 'G n m p', got {' '.join(tok)!r}", lineno)
        n, m, p = _ints(tok[1:], lineno, 3)
        if i + 1 + m + n >= len(body):
            raise ParseError("truncated graph block", lineno)
        edges = []
        for j in range(m):
            ln, et = body[i + 1 + j]
            u, v = _ints(et, ln, 2)
            if not (0 <= u < n and 0 <= v < n):
                raise ParseError(f"edge endpoint out of range for n={n}", ln)
            if u == v:
                raise ParseError("self-loop", ln)
            edges.append((u, v))
        feats = []
        for j in range(n):
            ln, ft = body[i + 1 + m + j]
            feats.append(_reals(ft, ln, p))
        ln, tt = body[i + 1 + m + n]
        if not tt or tt[0] != "T":
            raise ParseError("expected target line 'T q ...'", ln)
        (q,) = _ints(tt[1:2], ln, 1)
        t = _reals(tt[2:], ln, q)
        try:
            g = FeaturedGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2),
                              np.array(feats, dtype=np.float64).reshape(n, p))
        except ParameterError as exc:
            raise ParseError(str(exc), lineno) from None
        graphs.append(g)
        targets.append(t)
        i += m + n + 2
    return Dataset(graphs, targets, provenance)

