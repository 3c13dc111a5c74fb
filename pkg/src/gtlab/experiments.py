"""Training, size-extrapolation evaluation, metrics tables, CSV/SVG output and
the end-to-end experiment runner."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encodings import attach_pe, pe_width
from .errors import ConfigError, TrainingDiverged
from .graphs import (Dataset, ERMode, FeaturedGraph, GraphBatch, gen_erdos_renyi, hlr_dataset,
                     make_glr, make_rng, square_dataset, target_h, write_dataset)
from .models import NetworkSpec, bind, forward_batch, init_network, parameters, save_network
from .optim import adam_step

TASKS = ("square", "hlr")
MODELS = ("mpgnn_vn", "gps", "mpgnn", "gt")

# Stream tags keep the RNG draws of different pipeline stages independent.
_INIT_STREAM = 101
_ORDER_STREAM = 202
_EVAL_STREAM = 303


def _int_list(text: str) -> tuple[int, ...]:
    """'1,2,5' or a range 'start:stop:step' (stop inclusive)."""
    text = text.strip()
    if ":" in text:
        parts = [int(x) for x in text.split(":")]
        if len(parts) == 2:
            parts.append(1)
        a, b, s = parts
        if s <= 0:
            raise ConfigError(f"range step must be positive in {text!r}")
        vals = list(range(a, b + 1, s))
        if vals and vals[-1] != b:
            vals.append(b)
        return tuple(vals)
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass
class ExperimentConfig:
    task: str = "square"
    model: str = "mpgnn_vn"
    depth: int = 3
    hidden: int = 64
    mp: str = "gcn"
    heads: int = 4
    norm: str = "auto"          # auto: layernorm for attention models, identity otherwise
    pe: str = "auto"            # auto: lappe for GPS on the square task, none elsewhere
    pe_dim: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"    # constant | cosine (decay to 0 over all steps)
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    train_size: int = 10000
    n_min: int = 10
    n_max: int = 50
    degree_min: float = 1.0
    degree_max: float = 5.0
    l_min: int = 1
    l_max: int = 10
    r_min: int = 1
    r_max: int = 5
    edges: str = "erdos_renyi"
    eval_sizes: tuple = _int_list("50:200:25")
    eval_per_size: int = 500
    eval_l: tuple = (1,) + _int_list("5:50:5")
    eval_r: tuple = (1,) + _int_list("5:50:5")
    eval_per_cell: int = 5
    eval_seed: int = 12345
    checkpoint: str = "binary"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        for name in ("depth", "hidden", "heads", "pe_dim", "batch_size", "epochs", "train_size",
                     "eval_per_size", "eval_per_cell", "n_min", "l_min", "r_min"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be > 0")
        if self.n_min > self.n_max or self.l_min > self.l_max or self.r_min > self.r_max:
            raise ConfigError("empty training range")
        if not 0 < self.degree_min <= self.degree_max:
            raise ConfigError("degree range must be positive and ordered")
        if self.norm not in ("auto", "identity", "layernorm"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.pe not in ("auto", "none", "lappe", "rwse"):
            raise ConfigError(f"unknown PE {self.pe!r}")
        if self.mp not in ("gcn", "mpg"):
            raise ConfigError(f"unknown message-passing module {self.mp!r}")
        if self.edges not in ("erdos_renyi", "empty"):
            raise ConfigError(f"unknown edge mode {self.edges!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.checkpoint not in ("binary", "text"):
            raise ConfigError("checkpoint must be binary or text")
        if not self.eval_sizes or not self.eval_l or not self.eval_r:
            raise ConfigError("evaluation grid is empty")

    @property
    def pe_kind(self) -> str:
        if self.pe == "auto":
            return "lappe" if (self.task == "square" and self.model in ("gps", "gt")) else "none"
        return self.pe

    @property
    def norm_kind(self) -> str:
        if self.norm == "auto":
            return "layernorm" if self.model in ("gps", "gt") else "identity"
        return self.norm

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: Sequence[str]) -> "ExperimentConfig":
        return self.replace(**_parse_pairs(pairs, "override"))

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        lines = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                lines.append(line)
        return cls(**_parse_pairs(lines, "config line"))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_pairs(pairs: Sequence[str], what: str) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"{what} {item!r} is not key=value")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _FIELD_TYPES[key]
        try:
            if typ == "int":
                out[key] = int(val)
            elif typ == "float":
                out[key] = float(val)
            elif typ == "tuple":
                out[key] = _int_list(val)
            else:
                out[key] = val
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return out


FULL_SCALE = {"train_size": 100000, "hidden": 256, "depth": 3}


# ------------------------------------------------------------------ datasets


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.task == "square":
        return square_dataset(cfg.train_size, cfg.seed, (cfg.n_min, cfg.n_max),
                              (cfg.degree_min, cfg.degree_max))
    return hlr_dataset(cfg.train_size, cfg.seed, (cfg.l_min, cfg.l_max), (cfg.r_min, cfg.r_max),
                       (cfg.degree_min, cfg.degree_max), cfg.edges)


def build_model(cfg: ExperimentConfig, p: int) -> NetworkSpec:
    kind = cfg.pe_kind
    width = p + pe_width(kind, cfg.pe_dim)
    rng = make_rng(cfg.seed, _INIT_STREAM)
    return init_network(cfg.model, width, cfg.hidden, 1, cfg.depth, rng, mp=cfg.mp,
                        heads=cfg.heads, norm=cfg.norm_kind, pe_kind=kind, pe_dim=cfg.pe_dim)


def _replace_params(net, new: list[np.ndarray]):
    it = iter(new)
    from .models import map_params

    return map_params(net, lambda _: next(it))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    net: NetworkSpec
    history: list[float]
    seconds: float


def batch_loss(net, batch: GraphBatch, targets: np.ndarray, task: str):
    """Mean L1 error; on the square task each graph's error is divided by n^2."""
    out = forward_batch(net, batch)
    y = targets.reshape(-1, 1)
    w = np.full((len(batch), 1), 1.0 / len(batch))
    if task == "square":
        w = w / batch.sizes.reshape(-1, 1).astype(np.float64) ** 2
    return T.total(T.mul(T.abs_(T.sub(out, y)), w))


def learning_rate(cfg: ExperimentConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))


def train(cfg: ExperimentConfig, ds: Dataset, log: Callable[[str], None] | None = None) -> TrainResult:
    """Adam on the L1 loss with a fixed, seed-determined batch order.

    Each mini-batch is evaluated as one disjoint union of its graphs, which
    yields the same gradient as accumulating per-graph gradients.
    """
    start = time.perf_counter()
    graphs = [attach_pe(g, cfg.pe_kind, cfg.pe_dim) for g in ds.graphs]
    targets = np.array([t[0] for t in ds.targets])
    net = build_model(cfg, ds.graphs[0].p)
    params = list(parameters(net))
    state = None
    history = []
    N = len(graphs)
    per_epoch = -(-N // cfg.batch_size)
    total_steps = max(cfg.epochs * per_epoch, 1)
    step = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, _ORDER_STREAM, epoch).permutation(N)
        losses = []
        for s in range(0, N, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = GraphBatch([graphs[i] for i in idx])
            tape = T.Tape()
            bound = bind(net, tape)
            loss = batch_loss(bound, batch, targets[idx], cfg.task)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {s // cfg.batch_size}")
            tape.backward(loss)
            grads = [tape.grad(v) for v in parameters(bound)]
            lr = learning_rate(cfg, step, total_steps)
            step += 1
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            net = _replace_params(net, params)
            losses.append(value * len(idx))
        history.append(float(sum(losses) / N))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.6g}")
    return TrainResult(net, history, time.perf_counter() - start)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class Record:
    x: str
    series: str
    metric: str
    value: float
    seed: int


@dataclass
class MetricsTable:
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        keys = [(r.x, r.series, r.metric, r.seed) for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (x, series, metric, seed) record")

    def __len__(self) -> int:
        return len(self.records)

    def add(self, x, series: str, metric: str, value: float, seed: int) -> None:
        key = (str(x), series, metric, seed)
        if any((r.x, r.series, r.metric, r.seed) == key for r in self.records):
            raise ValueError(f"duplicate record {key}")
        self.records.append(Record(str(x), series, metric, float(value), int(seed)))

    def extend(self, other: "MetricsTable") -> None:
        for r in other.records:
            self.add(r.x, r.series, r.metric, r.value, r.seed)

    def sorted(self) -> "MetricsTable":
        return MetricsTable(sorted(self.records, key=lambda r: (r.series, r.metric, _xkey(r.x), r.seed)))

    def select(self, series: str | None = None, metric: str | None = None, x: str | None = None) -> list[Record]:
        return [r for r in self.records if (series is None or r.series == series)
                and (metric is None or r.metric == metric) and (x is None or r.x == str(x))]

    def values(self, series: str, metric: str, x) -> list[float]:
        return [r.value for r in self.select(series, metric, x)]

    def aggregate(self) -> list[tuple[str, str, str, float, float, int]]:
        """(x, series, metric, mean, population std, count) per grid point and series."""
        groups: dict[tuple, list[float]] = {}
        for r in self.records:
            groups.setdefault((r.x, r.series, r.metric), []).append(r.value)
        out = []
        for (x, s, m), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], _xkey(kv[0][0]))):
            a = np.array(vals)
            out.append((x, s, m, float(a.mean()), float(a.std()), len(a)))
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsTable) and sorted(self.records, key=_rkey) == sorted(other.records, key=_rkey)


def _rkey(r: Record):
    return (r.x, r.series, r.metric, r.seed)


def _xkey(x: str):
    try:
        return (0, tuple(float(p) for p in x.split(":")), x)
    except ValueError:
        return (1, (), x)


CSV_HEADER = ["x", "series", "metric", "value", "seed"]


def emit_csv(table: MetricsTable, path) -> None:
    if not len(table):
        raise ValueError("cannot write an empty metrics table")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in table.records:
            w.writerow([r.x, r.series, r.metric, repr(r.value), r.seed])


def read_csv(path) -> MetricsTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: missing header {','.join(CSV_HEADER)}")
    return MetricsTable([Record(x, s, m, float(v), int(sd)) for x, s, m, v, sd in rows[1:]])


# ------------------------------------------------------------------ SVG


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _ticks(lo: float, hi: float, k: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (k - 1) for i in range(k)]


def _line_svg(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
              log_y: bool) -> str:
    W, H, L, R, TOP, B = 640, 420, 70, 160, 40, 50
    pts = [p for s in series.values() for p in s]
    tf = (lambda v: math.log10(max(v, 1e-300))) if log_y else (lambda v: v)
    xs = [p[0] for p in pts]
    ys = [tf(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def sy(y):
        return H - B - (y - y0) / (y1 - y0) * (H - TOP - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2 - R / 2:.1f}" y="22" text-anchor="middle" font-size="15">{_esc(title)}</text>',
           f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
           f'<line x1="{L}" y1="{TOP}" x2="{L}" y2="{H - B}" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{H - B + 16}" text-anchor="middle" font-size="11">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        lab = f"1e{t:.2g}" if log_y else f"{t:.4g}"
        out.append(f'<text x="{L - 6}" y="{sy(t) + 4:.1f}" text-anchor="end" font-size="11">{lab}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{(TOP + H - B) / 2:.1f}" font-size="12" transform="rotate(-90 16 '
               f'{(TOP + H - B) / 2:.1f})" text-anchor="middle">{_esc(ylabel)}{" (log)" if log_y else ""}</text>')
    for i, (name, s) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(tf(y)):.2f}" for x, y in sorted(s))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{coords}"/>')
        ly = TOP + 18 * i + 10
        out.append(f'<line x1="{W - R + 12}" y1="{ly}" x2="{W - R + 32}" y2="{ly}" stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 38}" y="{ly + 4}" font-size="12">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _heat_svg(cells: dict[tuple[float, float], float], title: str, legend: str) -> str:
    ls = sorted({k[0] for k in cells})
    rs = sorted({k[1] for k in cells})
    C, L, TOP = 36, 60, 50
    W, H = L + C * len(rs) + 180, TOP + C * len(ls) + 60
    vals = np.array(list(cells.values()))
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo if hi > lo else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{L}" y="22" font-size="15">{_esc(title)}</text>']
    for i, l in enumerate(ls):
        out.append(f'<text x="{L - 6}" y="{TOP + C * i + C / 2 + 4:.1f}" text-anchor="end" font-size="11">{l:g}</text>')
        for j, r in enumerate(rs):
            if (l, r) not in cells:
                continue
            t = (cells[(l, r)] - lo) / span
            red, blue = int(255 * t), int(255 * (1 - t))
            out.append(f'<rect x="{L + C * j}" y="{TOP + C * i}" width="{C}" height="{C}" '
                       f'fill="rgb({red},64,{blue})"><title>l={l:g} r={r:g}: {cells[(l, r)]:.6g}</title></rect>')
    for j, r in enumerate(rs):
        out.append(f'<text x="{L + C * j + C / 2:.1f}" y="{TOP + C * len(ls) + 14}" text-anchor="middle" '
                   f'font-size="11">{r:g}</text>')
    x = L + C * len(rs) + 12
    out.append(f'<text x="{x}" y="{TOP + 10}" font-size="12">rows: l, columns: r</text>')
    out.append(f'<text x="{x}" y="{TOP + 28}" font-size="12">blue {lo:.4g}</text>')
    out.append(f'<text x="{x}" y="{TOP + 46}" font-size="12">red {hi:.4g}</text>')
    out.append(f'<text x="{x}" y="{TOP + 64}" font-size="11">{_esc(legend)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(table: MetricsTable, path, style: str = "line", metric: str | None = None,
             log_y: bool = False, title: str = "") -> None:
    """Line chart (x numeric, one polyline per series, seed mean) or a heatmap per series."""
    if not len(table):
        raise ValueError("cannot plot an empty metrics table")
    agg = [a for a in table.aggregate() if metric is None or a[2] == metric]
    if not agg:
        raise ValueError(f"no records for metric {metric!r}")
    metric = metric or agg[0][2]
    agg = [a for a in agg if a[2] == metric]
    if style == "line":
        series: dict[str, list] = {}
        for x, s, _, mean, _, _ in agg:
            series.setdefault(s, []).append((float(x), mean))
        svg = _line_svg(series, title or metric, "n", metric, log_y)
    elif style == "heatmap":
        names = sorted({a[1] for a in agg})
        if len(names) != 1:
            raise ValueError("heatmap needs exactly one series; filter the table first")
        cells = {tuple(float(p) for p in x.split(":")): mean for x, _, _, mean, _, _ in agg}
        svg = _heat_svg(cells, title or f"{names[0]} {metric}", "mean over seeds")
    else:
        raise ValueError(f"unknown plot style {style!r}")
    Path(path).write_text(svg)


def marginal_table(table: MetricsTable, metric: str = "mae") -> MetricsTable:
    """Collapse an l:r grid to l by averaging over r (per series and seed)."""
    groups: dict[tuple, list[float]] = {}
    for r in table.records:
        if r.metric != metric or ":" not in r.x:
            continue
        l = r.x.split(":")[0]
        groups.setdefault((l, r.series, r.seed), []).append(r.value)
    out = MetricsTable()
    for (l, s, sd), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], float(kv[0][0]), kv[0][2])):
        out.add(l, s, f"{metric}_mean_over_r", float(np.mean(vals)), sd)
    return out


# ---------------------------------------------------------------- evaluation


def eval_graphs_square(cfg: ExperimentConfig, n: int) -> list[FeaturedGraph]:
    out = []
    for i in range(cfg.eval_per_size):
        rng = make_rng(cfg.eval_seed, n, i)
        deg = min(float(rng.uniform(cfg.degree_min, cfg.degree_max)), n - 1)
        out.append(gen_erdos_renyi(n, deg, rng))
    return out


def eval_graphs_hlr(cfg: ExperimentConfig, l: int, r: int) -> list[FeaturedGraph]:
    out = []
    for i in range(cfg.eval_per_cell):
        if cfg.edges == "empty":
            out.append(make_glr(l, r))
            continue
        rng = make_rng(cfg.eval_seed, l, r, i)
        out.append(make_glr(l, r, ERMode(int(rng.integers(0, 2**63 - 1)), float(rng.uniform(cfg.degree_min, cfg.degree_max)))))
    return out


def _predict(net: NetworkSpec, graphs: list[FeaturedGraph], max_vertices: int = 20000) -> np.ndarray:
    from .constructions import evaluate_graphs

    return evaluate_graphs(net, graphs, max_vertices)


def evaluate_by_size(net: NetworkSpec, task: str, grid: Sequence, cfg: ExperimentConfig | None = None,
                     series: str = "model", seed: int = 0) -> MetricsTable:
    """Square: mean relative error per size n.  hlr: mean absolute error per (l, r) cell."""
    cfg = cfg or ExperimentConfig(task=task)
    table = MetricsTable()
    for point in grid:
        if task == "square":
            n = int(point)
            graphs = eval_graphs_square(cfg, n)
            pred = _predict(net, graphs)
            table.add(n, series, "relative_error", float(np.mean(np.abs(pred - n * n) / (n * n))), seed)
        elif task == "hlr":
            l, r = point
            graphs = eval_graphs_hlr(cfg, l, r)
            pred = _predict(net, graphs)
            table.add(f"{l}:{r}", series, "mae", float(np.mean(np.abs(pred - target_h(l, r)))), seed)
        else:
            raise ConfigError(f"unknown task {task!r}")
    return table


def eval_grid(cfg: ExperimentConfig) -> list:
    if cfg.task == "square":
        return list(cfg.eval_sizes)
    return [(l, r) for l in cfg.eval_l for r in cfg.eval_r]


# -------------------------------------------------------------------- runner


def plot_table(table: MetricsTable, plots: Path, task: str) -> list[Path]:
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if task == "square":
        p = plots / "relative_error.svg"
        emit_svg(table, p, "line", "relative_error", log_y=True, title="relative error vs n (seed mean)")
        written.append(p)
    else:
        for s in sorted({r.series for r in table.records}):
            p = plots / f"mae_heatmap_{s}.svg"
            emit_svg(MetricsTable(table.select(series=s, metric="mae")), p, "heatmap", "mae",
                     title=f"{s}: MAE over (l, r)")
            written.append(p)
        marg = marginal_table(table)
        if len(marg):
            p = plots / "mae_by_l.svg"
            emit_svg(marg, p, "line", "mae_mean_over_r", title="MAE vs l (mean over r and seeds)")
            written.append(p)
    return written


def run_experiment(cfg: ExperimentConfig, outdir, log: Callable[[str], None] | None = None) -> Path:
    """generate -> train -> evaluate -> emit, into ``outdir``.

    Layout: config.echo, data/train.txt, model.ckpt, metrics.csv,
    history.json, plots/*.svg.
    """
    out = Path(outdir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.to_text())
    ds = make_dataset(cfg)
    write_dataset(ds, out / "data" / "train.txt")
    res = train(cfg, ds, log)
    save_network(res.net, out / "model.ckpt", binary=cfg.checkpoint == "binary")
    table = evaluate_by_size(res.net, cfg.task, eval_grid(cfg), cfg, cfg.model, cfg.seed)
    emit_csv(table, out / "metrics.csv")
    (out / "history.json").write_text(json.dumps({"loss": res.history}) + "\n")
    plot_table(table, out / "plots", cfg.task)
    return out


def run_suite(cfg: ExperimentConfig, models: Sequence[str], seeds: Sequence[int], outdir,
              log: Callable[[str], None] | None = None) -> MetricsTable:
    """One run per (model, seed) under outdir/<model>_s<seed>, merged metrics at the top level."""
    out = Path(outdir)
    merged = MetricsTable()
    for model in models:
        for seed in seeds:
            run_cfg = cfg.replace(model=model, seed=seed)
            if log:
                log(f"== {cfg.task} {model} seed {seed}")
            d = run_experiment(run_cfg, out / f"{model}_s{seed}", log)
            merged.extend(read_csv(d / "metrics.csv"))
    merged = merged.sorted()
    emit_csv(merged, out / "metrics.csv")
    (out / "config.echo").write_text(cfg.to_text() + f"models={','.join(models)}\nseeds={','.join(map(str, seeds))}\n")
    plot_table(merged, out / "plots", cfg.task)
    return merged


def median_over_seeds(table: MetricsTable, series: str, metric: str, x) -> float:
    vals = table.values(series, metric, x)
    if not vals:
        raise KeyError(f"no records for {series}/{metric} at {x}")
    return float(np.median(vals))
