"""Command line entry point: ``lab gen|pe|verify|train|eval|plot|run``.

Exit codes: 0 success, 1 a verification or injectivity check failed,
2 bad configuration.  GTLAB_THREADS caps BLAS threads and evaluation workers.
"""
from __future__ import annotations

import argparse
import os
import sys

THREADS_ENV = "GTLAB_THREADS"


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def _pin_threads() -> None:
    n = str(_threads())
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _config(args):
    from .experiments import ExperimentConfig

    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(args.set or [])


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen(args) -> int:
    from .experiments import make_dataset
    from .graphs import write_dataset

    cfg = _config(args)
    ds = make_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} graphs to {args.out}")
    return 0


def cmd_pe(args) -> int:
    import numpy as np

    from .encodings import check_injectivity, encode
    from .graphs import make_gn, read_dataset

    if args.check is not None:
        rep = check_injectivity(args.check, args.kind, args.tol, args.dim)
        print(f"order<={args.check}: {len(rep.graphs)} graphs, {rep.pairs_checked} pairs, "
              f"{len(rep.violations)} violations")
        return 0 if rep.ok else 1
    g = read_dataset(args.dataset).graphs[args.index] if args.dataset else make_gn(args.n)
    np.savetxt(sys.stdout, encode(g, args.kind, args.dim), fmt="%.12g")
    return 0


def cmd_verify(args) -> int:
    from .constructions import run_all_checks

    reports = run_all_checks(args.out, workers=_threads(), lmax=args.lmax, nmax=args.nmax)
    ok = True
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{name}: {'PASS' if rep.passed else 'FAIL'} max_rel_error={rep.max_rel_error:.3e} "
              f"tol={rep.tol:g} points={len(rep.points)}")
    return 0 if ok else 1


def cmd_train(args) -> int:
    from pathlib import Path

    from .experiments import make_dataset, train
    from .graphs import write_dataset
    from .models import save_network

    cfg = _config(args)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.to_text())
    ds = make_dataset(cfg)
    write_dataset(ds, out / "data" / "train.txt")
    res = train(cfg, ds, _log)
    save_network(res.net, out / "model.ckpt", binary=cfg.checkpoint == "binary")
    print(f"trained in {res.seconds:.1f}s, final loss {res.history[-1]:.6g}")
    return 0


def cmd_eval(args) -> int:
    from .experiments import emit_csv, eval_grid, evaluate_by_size
    from .models import load_network

    cfg = _config(args)
    net = load_network(args.checkpoint)
    table = evaluate_by_size(net, cfg.task, eval_grid(cfg), cfg, args.series or cfg.model, cfg.seed)
    emit_csv(table, args.out)
    print(f"wrote {len(table)} records to {args.out}")
    return 0


def cmd_plot(args) -> int:
    from pathlib import Path

    from .experiments import plot_table, read_csv

    table = read_csv(args.metrics)
    task = "hlr" if any(r.metric == "mae" for r in table.records) else "square"
    for p in plot_table(table, Path(args.out), task):
        print(p)
    return 0


def cmd_run(args) -> int:
    from .experiments import run_suite

    cfg = _config(args)
    models = args.models.split(",") if args.models else [cfg.model]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    table = run_suite(cfg, models, seeds, args.out, _log)
    print(f"wrote {len(table)} records to {args.out}/metrics.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("gen", help="generate the training dataset of a config"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("pe", help="print an encoding or check its injectivity")
    p.add_argument("--kind", default="lappe", choices=["lappe", "rwse"])
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--dataset", help="dataset file; default is the edgeless graph on --n vertices")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--check", type=int, metavar="ORDER", help="check injectivity up to this order")
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(fn=cmd_pe)

    p = sub.add_parser("verify", help="check the exact constructions on their full grids")
    p.add_argument("--out", help="directory for per-point CSV reports")
    p.add_argument("--lmax", type=int, default=50)
    p.add_argument("--nmax", type=int, default=1000)
    p.set_defaults(fn=cmd_verify)

    p = with_config(sub.add_parser("train", help="generate data and train one model"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the config's grid"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--series")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plot", help="render SVG plots from a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)

    p = with_config(sub.add_parser("run", help="full pipeline for each model and seed"))
    p.add_argument("--out", required=True)
    p.add_argument("--models", help="comma list, default: the config's model")
    p.add_argument("--seeds", help="comma list, default: the config's seed")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    _pin_threads()
    args = build_parser().parse_args(argv)
    from .errors import ConfigError

    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
