"""Positional / structural encodings and the machinery they rest on.

LapPE needs a symmetric eigensolver; :func:`jacobi_eig` is the reference
implementation, LAPACK's ``eigh`` takes over for larger matrices where the
cyclic sweeps become too slow.  Both paths apply the same ordering and sign
conventions.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, PrecisionError
from .graphs import FeaturedGraph

JACOBI_MAX_N = 8
PE_KINDS = ("none", "lappe", "rwse")


@dataclass
class EigenDecomposition:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # orthonormal columns


@dataclass
class EncodingMatrix:
    values: np.ndarray
    kind: str
    dim: int
    clamp: tuple[float, float] = (-1.0, 1.0)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def laplacian(g: FeaturedGraph) -> np.ndarray:
    L = np.zeros((g.n, g.n))
    if g.m:
        u, v = g.edges[:, 0], g.edges[:, 1]
        L[u, v] = -1.0
        L[v, u] = -1.0
        np.add.at(L, (u, u), 1.0)
        np.add.at(L, (v, v), 1.0)
    return L


def _check_symmetric(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractError(f"square matrix expected, got shape {M.shape}")
    if M.size and np.max(np.abs(M - M.T)) > 1e-12:
        raise ContractError("matrix is not symmetric")
    return M


def _canonicalise(values: np.ndarray, vectors: np.ndarray) -> EigenDecomposition:
    order = np.argsort(values, kind="stable")
    values = values[order]
    vectors = vectors[:, order].copy()
    for j in range(vectors.shape[1]):
        big = np.flatnonzero(np.abs(vectors[:, j]) > 1e-8)
        if len(big) and vectors[big[0], j] < 0:
            vectors[:, j] *= -1.0
    return EigenDecomposition(values, vectors)


def jacobi_eig(M, tol: float = 1e-12, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi rotations until the largest off-diagonal entry is below ``tol``."""
    A = _check_symmetric(M).copy()
    n = A.shape[0]
    V = np.eye(n)
    if n <= 1:
        return _canonicalise(np.diag(A).copy(), V)
    iu = np.triu_indices(n, 1)
    for _ in range(max_sweeps):
        if np.max(np.abs(A[iu])) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return _canonicalise(np.diag(A).copy(), V)


def sym_eig(M, method: str = "auto") -> EigenDecomposition:
    """Eigen-decomposition of a symmetric matrix, eigenvalues ascending.

    Each eigenvector is signed so its first entry with magnitude above 1e-8 is
    positive.  ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up
    to JACOBI_MAX_N rows).
    """
    M = _check_symmetric(M)
    if method == "auto":
        method = "jacobi" if M.shape[0] <= JACOBI_MAX_N else "lapack"
    if method == "jacobi":
        return jacobi_eig(M)
    if method == "lapack":
        w, U = np.linalg.eigh(M)
        return _canonicalise(w, U)
    raise ValueError(f"unknown eigen method {method!r}")


def lappe(g: FeaturedGraph, m: int, method: str = "auto") -> EncodingMatrix:
    """Interleaved (lambda_i / n, u_iv) for the first m eigenpairs, zero padded past n."""
    if m < 1:
        raise ParameterError("LapPE needs m >= 1")
    n = g.n
    out = np.zeros((n, 2 * m))
    if n == 0:
        return EncodingMatrix(out, "lappe", m)
    eig = sym_eig(laplacian(g), method)
    k = min(m, n)
    out[:, 0:2 * k:2] = eig.values[:k] / n
    out[:, 1:2 * k:2] = eig.vectors[:, :k]
    np.clip(out, -1.0, 1.0, out=out)
    return EncodingMatrix(out, "lappe", m)


def rwse(g: FeaturedGraph, k: int) -> EncodingMatrix:
    """Return probabilities ((D^-1 A)^t)_vv for t = 1..k; isolated vertices get 0."""
    if k < 1:
        raise ParameterError("RWSE needs k >= 1")
    A = g.adjacency.toarray()
    deg = A.sum(axis=1)
    P = np.divide(A, deg[:, None], out=np.zeros_like(A), where=deg[:, None] > 0)
    out = np.zeros((g.n, k))
    Pt = np.eye(g.n)
    for t in range(k):
        Pt = Pt @ P
        out[:, t] = np.diag(Pt)
    return EncodingMatrix(np.clip(out, 0.0, 1.0), "rwse", k, (0.0, 1.0))


def encode(g: FeaturedGraph, kind: str, dim: int) -> np.ndarray:
    if kind == "lappe":
        return lappe(g, dim).values
    if kind == "rwse":
        return rwse(g, dim).values
    if kind == "none":
        return np.zeros((g.n, 0))
    raise ParameterError(f"unknown positional encoding {kind!r}")


def pe_width(kind: str, dim: int) -> int:
    return {"lappe": 2 * dim, "rwse": dim, "none": 0}[kind]


def attach_pe(g: FeaturedGraph, kind: str, dim: int) -> FeaturedGraph:
    """Concatenate the encoding to the existing vertex features."""
    if kind == "none":
        return g
    return g.with_features(np.concatenate([g.features, encode(g, kind, dim)], axis=1))


# ------------------------------------------------------------ multiset hash


def multiset_hash(M: Iterable[int], n: int, k: int | None = None) -> float:
    """H(M) = sum_j m_j 2^(-j*l), l = floor(log2 n) + 1, for elements indexed 1..k.

    Distinct multisets of size <= n are at least 2^(-k*l) apart.  Refuses when
    k*l exceeds 50 bits, where float64 can no longer keep them apart.
    """
    counts = Counter(int(x) for x in M)
    if n < 1:
        raise ParameterError("n must be >= 1")
    if sum(counts.values()) > n:
        raise ContractError(f"multiset has {sum(counts.values())} elements, more than n={n}")
    if k is None:
        k = max(counts, default=1)
    if counts and (min(counts) < 1 or max(counts) > k):
        raise ContractError(f"element index outside [1, {k}]")
    ell = n.bit_length()
    if k * ell > 50:
        raise PrecisionError(f"k*l = {k * ell} bits exceeds the float64 budget of 50")
    return math.fsum(math.ldexp(m, -j * ell) for j, m in counts.items())


def hash_resolution(n: int, k: int) -> float:
    return math.ldexp(1.0, -k * n.bit_length())


# -------------------------------------------------------------- isomorphism


def isomorphic(g1: FeaturedGraph, g2: FeaturedGraph) -> bool:
    """Exact isomorphism test (edges and feature rows) by pruned permutation search."""
    if max(g1.n, g2.n) > 12:
        raise ContractError("isomorphism search is limited to n <= 12")
    if g1.n != g2.n or g1.m != g2.m or g1.p != g2.p:
        return False
    n = g1.n
    d1, d2 = g1.degrees(), g2.degrees()
    if sorted(d1) != sorted(d2):
        return False
    f1 = [tuple(r) for r in g1.features]
    f2 = [tuple(r) for r in g2.features]
    if Counter(zip(d1, f1)) != Counter(zip(d2, f2)):
        return False
    A1 = g1.adjacency.toarray() > 0
    A2 = g2.adjacency.toarray() > 0
    order = sorted(range(n), key=lambda v: -d1[v])
    cands = {v: [w for w in range(n) if d2[w] == d1[v] and f2[w] == f1[v]] for v in range(n)}
    mapping = [-1] * n
    used = [False] * n

    def extend(i: int) -> bool:
        if i == n:
            return True
        v = order[i]
        for w in cands[v]:
            if used[w]:
                continue
            if all(A1[v, order[j]] == A2[w, mapping[order[j]]] for j in range(i)):
                mapping[v] = w
                used[w] = True
                if extend(i + 1):
                    return True
                used[w] = False
        mapping[v] = -1
        return False

    return extend(0)


def enumerate_graphs(order: int) -> list[FeaturedGraph]:
    """One representative per isomorphism class for every n in 1..order (features constant 1)."""
    if order > 6:
        raise ContractError("graph enumeration is limited to order <= 6")
    reps: list[FeaturedGraph] = []
    for n in range(1, order + 1):
        pairs = list(itertools.combinations(range(n), 2))
        buckets: dict[tuple, list[FeaturedGraph]] = defaultdict(list)
        for mask in range(1 << len(pairs)):
            edges = [pairs[b] for b in range(len(pairs)) if mask >> b & 1]
            g = FeaturedGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), np.ones((n, 1)))
            key = (g.m, tuple(sorted(g.degrees())))
            if not any(isomorphic(g, h) for h in buckets[key]):
                buckets[key].append(g)
                reps.append(g)
    return reps


# ------------------------------------------------------------- injectivity


def multisets_match(A: np.ndarray, B: np.ndarray, tol: float) -> bool:
    """Greedy tolerance-aware equality of two multisets of row vectors."""
    if A.shape != B.shape:
        return False
    A = A[np.lexsort(A.T[::-1])] if A.size else A
    B = B[np.lexsort(B.T[::-1])] if B.size else B
    free = list(range(len(B)))
    for row in A:
        for idx, j in enumerate(free):
            if np.max(np.abs(B[j] - row), initial=0.0) <= tol:
                del free[idx]
                break
        else:
            return False
    return True


@dataclass
class InjectivityReport:
    order: int
    graphs: list[FeaturedGraph]
    pairs_checked: int
    violations: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_injectivity(order: int, encoder: str | Callable[[FeaturedGraph], np.ndarray] = "lappe",
                      tol: float = 1e-9, dim: int | None = None) -> InjectivityReport:
    """Report non-isomorphic pairs (order <= ``order``) whose encoding multisets coincide."""
    graphs = enumerate_graphs(order)
    if callable(encoder):
        enc = encoder
    else:
        m = dim if dim is not None else order
        enc = lambda g: encode(g, encoder, m)  # noqa: E731
    sets = [np.asarray(enc(g), dtype=np.float64).reshape(g.n, -1) for g in graphs]
    report = InjectivityReport(order, graphs, 0)
    for i, j in itertools.combinations(range(len(graphs)), 2):
        report.pairs_checked += 1
        if multisets_match(sets[i], sets[j], tol):
            report.violations.append((i, j))
    return report
