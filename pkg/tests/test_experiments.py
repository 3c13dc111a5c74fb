import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gtlab.constructions import build_h_gps, build_square_counter
from gtlab.errors import ConfigError, TrainingDiverged
from gtlab.experiments import (ExperimentConfig, MetricsTable, emit_csv, emit_svg, evaluate_by_size,
                               learning_rate, make_dataset, marginal_table, median_over_seeds, read_csv,
                               run_experiment, train)
import gtlab.experiments as E
from gtlab.models import flat_params, init_network, map_params
from gtlab.optim import adam_step

SMALL = dict(train_size=48, epochs=2, batch_size=16, hidden=8, depth=1, heads=2,
             eval_sizes=(12, 20), eval_per_size=3, eval_l=(1, 3), eval_r=(1, 2), eval_per_cell=1)


class TestAdam:
    def test_zero_gradient(self):
        p = [np.ones((2, 2))]
        new, st = adam_step(p, [np.zeros((2, 2))], None, 1e-2)
        assert np.array_equal(new[0], p[0]) and st.step == 1
        assert np.all(st.m[0] == 0) and np.all(st.v[0] == 0)

    def test_constant_gradient_step_tends_to_lr(self):
        p, st = [np.zeros((1, 1))], None
        g = [np.full((1, 1), 0.3)]
        for _ in range(3000):
            p, st = adam_step(p, g, st, 1e-3)
        p2, _ = adam_step(p, g, st, 1e-3)
        assert p[0].item() < 0
        assert p[0].item() - p2[0].item() == pytest.approx(1e-3, rel=1e-6)

    def test_deterministic(self):
        r = np.random.default_rng(0)
        gs = [[r.normal(size=(3, 2))] for _ in range(20)]

        def run():
            p, st = [np.ones((3, 2))], None
            for g in gs:
                p, st = adam_step(p, g, st, 1e-2)
            return p[0]

        assert run().tobytes() == run().tobytes()


class TestConfig:
    def test_parse_and_echo(self):
        cfg = ExperimentConfig.from_text("# comment\ntask=hlr\nmodel = gps\nlr=0.01\neval_l=1:10:3\n")
        assert (cfg.task, cfg.model, cfg.lr, cfg.eval_l) == ("hlr", "gps", 0.01, (1, 4, 7, 10))
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text", ["task=cubes", "lr=0", "lr=-1", "epochs=0", "nonsense", "depth=x",
                                      "unknown_key=1", "n_min=60"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_text(text)

    def test_overrides(self):
        cfg = ExperimentConfig().with_overrides(["seed=4", "hidden=32"])
        assert cfg.seed == 4 and cfg.hidden == 32

    def test_auto_choices(self):
        assert ExperimentConfig(task="square", model="gps").pe_kind == "lappe"
        assert ExperimentConfig(task="hlr", model="gps").pe_kind == "none"
        assert ExperimentConfig(model="mpgnn_vn").norm_kind == "identity"
        assert ExperimentConfig(model="gps").norm_kind == "layernorm"
        assert ExperimentConfig(model="gps", norm="identity").norm_kind == "identity"

    def test_cosine_schedule(self):
        cfg = ExperimentConfig(lr=1e-3)
        assert learning_rate(cfg, 0, 100) == 1e-3
        assert learning_rate(cfg, 50, 100) == pytest.approx(5e-4)
        assert learning_rate(cfg.replace(schedule="constant"), 99, 100) == 1e-3


class TestTrain:
    def test_zero_learning_rate_keeps_parameters(self):
        cfg = ExperimentConfig(task="square", model="gps", **{**SMALL, "epochs": 1})
        cfg.lr = 0.0
        ds = make_dataset(cfg)
        res = train(cfg, ds)
        assert flat_params(res.net).tobytes() == flat_params(E.build_model(cfg, 1)).tobytes()

    def test_deterministic(self):
        cfg = ExperimentConfig(task="hlr", model="mpgnn_vn", **SMALL)
        ds = make_dataset(cfg)
        a, b = train(cfg, ds), train(cfg, ds)
        assert flat_params(a.net).tobytes() == flat_params(b.net).tobytes() and a.history == b.history

    @pytest.mark.parametrize("model", ["mpgnn_vn", "gps"])
    def test_hlr_loss_decreases(self, model):
        cfg = ExperimentConfig(task="hlr", model=model, **{**SMALL, "train_size": 128, "epochs": 6,
                                                           "hidden": 16, "lr": 3e-3})
        hist = train(cfg, make_dataset(cfg)).history
        assert hist[-1] < 0.5 * hist[0]

    def test_divergence_aborts(self, monkeypatch):
        from gtlab import tensor as T
        cfg = ExperimentConfig(task="square", **SMALL)
        monkeypatch.setattr(E, "batch_loss", lambda *a: T.Tensor([[float("nan")]]))
        with pytest.raises(TrainingDiverged, match="non-finite"):
            train(cfg, make_dataset(cfg))

    def test_batched_gradient_equals_accumulated(self):
        from gtlab.graphs import GraphBatch
        from gtlab.models import bind, parameters
        from gtlab.tensor import Tape
        cfg = ExperimentConfig(task="square", model="gps", **SMALL)
        ds = make_dataset(cfg)
        graphs = [E.attach_pe(g, cfg.pe_kind, cfg.pe_dim) for g in ds.graphs[:5]]
        y = np.array([t[0] for t in ds.targets[:5]])
        net = E.build_model(cfg, 1)

        def grads(gs, ys, weight):
            tape = Tape()
            bound = bind(net, tape)
            loss = E.batch_loss(bound, GraphBatch(gs), ys, "square")
            tape.backward(loss)
            return np.concatenate([tape.grad(v).ravel() for v in parameters(bound)]) * weight

        whole = grads(graphs, y, 1.0)
        acc = sum(grads([g], y[i:i + 1], 1 / 5) for i, g in enumerate(graphs))
        assert np.allclose(whole, acc, rtol=1e-10, atol=1e-14)


class TestEvaluate:
    def test_square_counter(self):
        cfg = ExperimentConfig(eval_per_size=5)
        tab = evaluate_by_size(build_square_counter(), "square", [50, 100, 150, 200], cfg)
        assert max(r.value for r in tab.records) <= 1e-6

    def test_h_gps(self):
        cfg = ExperimentConfig(task="hlr", eval_per_cell=1, edges="empty")
        grid = [(l, r) for l in (1, 10, 50) for r in (1, 25, 50)]
        tab = evaluate_by_size(build_h_gps(), "hlr", grid, cfg)
        assert max(r.value for r in tab.records) <= 1e-6

    def test_zero_network(self):
        net = map_params(init_network("mpgnn_vn", 1, 4, 1, 1, np.random.default_rng(0)), np.zeros_like)
        tab = evaluate_by_size(net, "square", [50, 100], ExperimentConfig(eval_per_size=3))
        assert [r.value for r in tab.records] == [1.0, 1.0]

    def test_grid_order_does_not_matter(self):
        net = init_network("gps", 1, 4, 1, 1, np.random.default_rng(2), heads=2)
        cfg = ExperimentConfig(eval_per_size=4)
        a = evaluate_by_size(net, "square", [20, 40, 60], cfg)
        b = evaluate_by_size(net, "square", [60, 20, 40], cfg)
        assert a == b


class TestMetrics:
    def test_duplicates_rejected(self):
        t = MetricsTable()
        t.add(50, "gps", "relative_error", 0.1, 0)
        with pytest.raises(ValueError):
            t.add(50, "gps", "relative_error", 0.2, 0)

    def test_aggregate_population_std(self):
        t = MetricsTable()
        for s, v in enumerate([1.0, 2.0, 4.0]):
            t.add(10, "m", "mae", v, s)
        (x, series, metric, mean, std, count), = t.aggregate()
        assert mean == pytest.approx(7 / 3) and std == pytest.approx(np.std([1.0, 2.0, 4.0])) and count == 3
        assert median_over_seeds(t, "m", "mae", 10) == 2.0

    def test_csv_round_trip(self, tmp_path):
        t = MetricsTable()
        t.add(50, "mpgnn_vn", "relative_error", 0.1 + 0.2, 0)
        t.add("3:4", "gps", "mae", 1e-17, 2)
        emit_csv(t, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == "x,series,metric,value,seed"
        assert read_csv(tmp_path / "m.csv") == t

    def test_single_point_outputs(self, tmp_path):
        t = MetricsTable()
        t.add(50, "gps", "relative_error", 0.5, 0)
        emit_csv(t, tmp_path / "m.csv")
        assert len((tmp_path / "m.csv").read_text().splitlines()) == 2
        emit_svg(t, tmp_path / "p.svg")
        ET.parse(tmp_path / "p.svg")

    def test_two_series_two_polylines(self, tmp_path):
        t = MetricsTable()
        for n in (50, 100, 200):
            t.add(n, "gps", "relative_error", n / 200, 0)
            t.add(n, "mpgnn_vn", "relative_error", 0.01, 0)
        emit_svg(t, tmp_path / "p.svg", log_y=True)
        root = ET.parse(tmp_path / "p.svg").getroot()
        lines = [e for e in root.iter() if e.tag.endswith("polyline")]
        assert len(lines) == 2 and lines[0].get("points") != lines[1].get("points")

    def test_heatmap_and_marginals(self, tmp_path):
        t = MetricsTable()
        for l in (1, 5):
            for r in (1, 5):
                t.add(f"{l}:{r}", "gps", "mae", l * r, 0)
        emit_svg(t, tmp_path / "h.svg", "heatmap", "mae")
        root = ET.parse(tmp_path / "h.svg").getroot()
        assert sum(e.tag.endswith("rect") for e in root.iter()) == 5  # background + 4 cells
        m = marginal_table(t)
        assert [r.value for r in m.records] == [3.0, 15.0]

    def test_empty_table_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_csv(MetricsTable(), tmp_path / "x.csv")


class TestRunExperiment:
    def test_layout_and_determinism(self, tmp_path):
        cfg = ExperimentConfig(task="square", model="gps", **SMALL)
        a = run_experiment(cfg, tmp_path / "a")
        b = run_experiment(cfg, tmp_path / "b")
        for name in ("config.echo", "data/train.txt", "model.ckpt", "metrics.csv", "plots/relative_error.svg"):
            assert (a / name).is_file()
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert ExperimentConfig.from_file(a / "config.echo") == cfg
