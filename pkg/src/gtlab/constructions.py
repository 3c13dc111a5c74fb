"""Hand-wired networks that compute their targets exactly, plus the probes that
separate the architectures: boundedness, divergence and finite memorisation."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encodings import encode, enumerate_graphs
from .graphs import FeaturedGraph, GraphBatch, gen_erdos_renyi, make_glr, make_gn, make_rng, target_h
from .models import (AttentionHead, GCNSpec, GPSLayer, MLPSpec, MPGSpec, MPVNLayer, NetworkSpec,
                     NormSpec, ReadoutSpec, SelfAttentionSpec, forward_batch, forward_states,
                     init_mlp, mlp_forward, prepare_graph)
from .optim import adam_step
from .tensor import Tape, total, abs_, sub


def _mlp(W, b) -> MLPSpec:
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    return MLPSpec([W], [np.asarray(b, dtype=np.float64).reshape(1, W.shape[0])])


# -------------------------------------------------------------- constructions


def build_square_counter(p: int = 1) -> NetworkSpec:
    """n^2 on any graph with p input features.

    P sends every vertex to the constant 1; the layer's update is zero so the
    skip connection passes 1 through; the virtual-node readout sums to n and
    subtracts 1, and adding it back gives n at every vertex; the final sum
    readout returns n * n.
    """
    prep = _mlp(np.zeros((1, p)), [1.0])
    update = _mlp(np.zeros((1, 2)), [0.0])
    vn = ReadoutSpec(_mlp([[1.0]], [-1.0]), "sum")
    layer = MPVNLayer(MPGSpec(update, "sum"), vn)
    return NetworkSpec(prep, [layer], ReadoutSpec(_mlp([[1.0]], [0.0]), "sum"),
                       notes="P=1; U=0; VN readout s-1 (sum); final readout identity (sum)")


def build_h_gps() -> NetworkSpec:
    """One theory-mode GPS layer whose sum readout equals h(G_{l,r}).

    State width 3: P copies the two input features into channels 1-2 and leaves
    channel 3 at zero.  The single head (d_h = 1) uses W_Q = (1,1,0)^T,
    W_K = (2,3,0)^T, W_V = (2,-1,0)^T and W_O = (0,0,1), so the head value
    lands alone in channel 3.  MP (a GCN with zero weight) and FF are zero and
    norms are identity, hence Y = 2X + SA(X): channel 3 holds exactly the head
    value.  The final readout sums vertices and keeps channel 3 only.
    """
    prep = _mlp([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], np.zeros(3))
    head = AttentionHead(np.array([[1.0], [1.0], [0.0]]),
                         np.array([[2.0], [3.0], [0.0]]),
                         np.array([[2.0], [-1.0], [0.0]]))
    sa = SelfAttentionSpec([head], np.array([[0.0, 0.0, 1.0]]))
    ff = _mlp(np.zeros((3, 3)), np.zeros(3))
    layer = GPSLayer(sa, GCNSpec(np.zeros((3, 3))), ff, NormSpec(), NormSpec(), NormSpec())
    readout = ReadoutSpec(_mlp([[0.0, 0.0, 1.0]], [0.0]), "sum")
    return NetworkSpec(prep, [layer], readout,
                       notes="P embeds (a,b)->(a,b,0); head W_Q=(1,1,0) W_K=(2,3,0) W_V=(2,-1,0); "
                             "W_O=(0,0,1); MP=0, FF=0, identity norms; readout sums channel 3")


# --------------------------------------------------------------- verification


@dataclass
class VerificationReport:
    points: list
    expected: np.ndarray
    actual: np.ndarray
    tol: float
    abs_error: np.ndarray = field(init=False)
    rel_error: np.ndarray = field(init=False)

    def __post_init__(self):
        self.expected = np.asarray(self.expected, dtype=np.float64)
        self.actual = np.asarray(self.actual, dtype=np.float64)
        self.abs_error = np.abs(self.actual - self.expected)
        denom = np.where(self.expected != 0, np.abs(self.expected), 1.0)
        self.rel_error = self.abs_error / denom

    @property
    def max_abs_error(self) -> float:
        return float(self.abs_error.max())

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max())

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point", "expected", "actual", "rel_error"])
            for p, e, a, r in zip(self.points, self.expected, self.actual, self.rel_error):
                w.writerow([" ".join(map(str, p)) if isinstance(p, tuple) else p, repr(float(e)),
                            repr(float(a)), repr(float(r))])


def evaluate_graphs(net: NetworkSpec, graphs: Sequence[FeaturedGraph], max_vertices: int = 200_000,
                    workers: int = 1) -> np.ndarray:
    """First output coordinate for each graph, batched up to ``max_vertices`` per chunk."""
    graphs = [prepare_graph(net, g) for g in graphs]
    chunks, cur, size = [], [], 0
    for g in graphs:
        if cur and size + g.n > max_vertices:
            chunks.append(cur)
            cur, size = [], 0
        cur.append(g)
        size += g.n
    if cur:
        chunks.append(cur)

    def run(chunk):
        return forward_batch(net, GraphBatch(chunk)).data[:, 0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def verify_construction(net: NetworkSpec, family: Callable, target: Callable, grid: Sequence,
                        tol: float, workers: int = 1) -> VerificationReport:
    """Evaluate ``net`` on ``family(*point)`` for each grid point against ``target(*point)``."""
    if len(grid) == 0:
        raise ValueError("verification grid is empty")
    pts = [p if isinstance(p, tuple) else (p,) for p in grid]
    graphs = [family(*p) for p in pts]
    actual = evaluate_graphs(net, graphs, workers=workers)
    expected = [target(*p) for p in pts]
    return VerificationReport(list(grid), expected, actual, tol)


def square_family(seed: int = 0, mean_degree: float = 3.0) -> Callable[[int], FeaturedGraph]:
    """n -> an ER graph on n vertices (mean degree clipped for tiny n)."""
    def make(n: int) -> FeaturedGraph:
        return gen_erdos_renyi(n, min(mean_degree, n - 1), make_rng(seed, n))
    return make


def h_grid(lmax: int = 50, rmax: int = 50) -> list[tuple[int, int]]:
    return [(l, r) for l in range(1, lmax + 1) for r in range(1, rmax + 1)]


# --------------------------------------------------------------------- probes


@dataclass
class BoundednessResult:
    ns: list
    layer_max: np.ndarray          # (len(ns), layers + 1): max |state| after P and each layer
    vertex_spread: float           # max over n of (max - min) of final vertex states, all n pooled
    output_per_vertex: np.ndarray  # |graph output| / n

    @property
    def growth(self) -> float:
        """Largest final-layer max activation divided by the smallest."""
        last = self.layer_max[:, -1]
        return float(last.max() / max(last.min(), 1e-300))


def boundedness_probe(net: NetworkSpec, ns: Sequence[int], encoder: str = "none",
                      dim: int = 8) -> BoundednessResult:
    """Per-layer max |activation| on edgeless make_gn(n, encoder) graphs for each n."""
    rows, finals, outs = [], [], []
    for n in ns:
        g = make_gn(n, encoder, dim)
        batch = GraphBatch([g])
        states = forward_states(net, batch)
        rows.append([float(np.abs(s.data).max()) for s in states])
        finals.append(states[-1].data)
        out = forward_batch(net, batch).data
        outs.append(float(np.abs(out).max()) / n)
    pooled = np.vstack(finals)
    spread = float((pooled.max(axis=0) - pooled.min(axis=0)).max())
    return BoundednessResult(list(ns), np.array(rows), spread, np.array(outs))


@dataclass
class DivergenceResult:
    r: int
    ls: list
    errors: np.ndarray

    @property
    def tail_increasing(self) -> bool:
        tail = self.errors[len(self.errors) // 2:]
        return bool(len(tail) >= 2 and np.all(np.diff(tail) > 0))

    @property
    def ratio(self) -> float:
        return float(self.errors[-1] / max(self.errors[0], 1e-300))


def divergence_probe(net: NetworkSpec, r: int, ls: Sequence[int]) -> DivergenceResult:
    """|net(G_{l,r}) - h(G_{l,r})| at fixed r for increasing l (edgeless graphs)."""
    preds = evaluate_graphs(net, [make_glr(l, r) for l in ls])
    errs = np.abs(preds - np.array([target_h(l, r) for l in ls]))
    return DivergenceResult(r, list(ls), errs)


# -------------------------------------------------------------- memorisation


@dataclass
class MemorizeReport:
    graphs: list
    targets: np.ndarray
    predictions: np.ndarray
    width: int
    eps: float
    widths_tried: list

    @property
    def max_error(self) -> float:
        return float(np.abs(self.predictions - self.targets).max())

    @property
    def success(self) -> bool:
        return self.max_error <= self.eps


def stacked_encoding(g: FeaturedGraph, encoder: str, dim: int, order: int) -> np.ndarray:
    """Vertex encodings stacked row by row into one vector, zero padded to ``order`` rows."""
    E = encode(g, encoder, dim) if encoder != "none" else np.asarray(g.features)
    out = np.zeros((order, E.shape[1]))
    out[:g.n] = E
    return out.ravel()


def _fit_output(H: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Hb = np.hstack([H, np.ones((H.shape[0], 1))])
    coef = np.linalg.lstsq(Hb, y, rcond=None)[0]
    return coef[:-1].reshape(1, -1), coef[-1:].reshape(1, 1)


def memorize_demo(order: int, encoder: str, target: Callable[[FeaturedGraph], float], eps: float,
                  width: int = 8, cap: int = 4096, seed: int = 0, steps: int = 2000,
                  lr: float = 1e-2) -> tuple[MLPSpec, MemorizeReport]:
    """Fit a 2-layer MLP on stacked encodings of every graph up to ``order``.

    The hidden layer starts random; the output layer is solved by least squares
    and then the whole MLP is refined by Adam on the L1 error.  Width doubles
    until every graph is fitted within ``eps`` or ``cap`` is exceeded.
    """
    if order > 4:
        raise ValueError("memorize_demo enumerates graphs of order <= 4")
    graphs = enumerate_graphs(order)
    dim = order
    X = np.vstack([stacked_encoding(g, encoder, dim, order) for g in graphs])
    y = np.array([float(target(g)) for g in graphs])
    rng = make_rng(seed)
    tried = []
    w = width
    best = None
    while w <= cap:
        tried.append(w)
        spec = init_mlp(rng, [X.shape[1], w, 1])
        W1, b1 = spec.weights[0], spec.biases[0]
        b1 = rng.uniform(-1.0, 1.0, size=b1.shape)
        H = np.maximum(X @ W1.T + b1, 0.0)
        W2, b2 = _fit_output(H, y)
        params = [W1, b1, W2, b2]
        pred = (H @ W2.T + b2).ravel()
        state = None
        for _ in range(steps):
            if np.abs(pred - y).max() <= eps:
                break
            tape = Tape()
            vs = [tape.variable(p) for p in params]
            out = mlp_forward(MLPSpec([vs[0], vs[2]], [vs[1], vs[3]]), X)
            loss = total(abs_(sub(out, y.reshape(-1, 1))))
            tape.backward(loss)
            params, state = adam_step(params, [tape.grad(v) for v in vs], state, lr)
            pred = mlp_forward(MLPSpec([params[0], params[2]], [params[1], params[3]]), X).data.ravel()
        fitted = MLPSpec([params[0], params[2]], [params[1], params[3]])
        best = (fitted, pred)
        if np.abs(pred - y).max() <= eps:
            break
        w *= 2
    fitted, pred = best
    return fitted, MemorizeReport(graphs, y, pred, fitted.weights[0].shape[0], eps, tried)


# ------------------------------------------------------------ check bundle


def run_all_checks(outdir=None, workers: int = 1, lmax: int = 50, nmax: int = 1000) -> dict[str, VerificationReport]:
    """Both exact constructions on their full grids; optional CSV per report."""
    reports = {
        "square_counter": verify_construction(build_square_counter(), square_family(), lambda n: float(n) ** 2,
                                              list(range(1, nmax + 1)), 1e-6, workers),
        "h_gps": verify_construction(build_h_gps(), make_glr, target_h, h_grid(lmax, lmax), 1e-9, workers),
    }
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            rep.write_csv(out / f"verify_{name}.csv")
    return reports
