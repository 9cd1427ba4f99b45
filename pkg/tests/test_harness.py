import dataclasses

import numpy as np
import pytest

from alignscope import harness
from alignscope.errors import ConfigError, InvalidParameterError, UndefinedMetricError
from alignscope.harness import COLUMNS, RunConfig, correlation, load_config, read_metrics_csv, sweep, train
from alignscope.metrics import class_alignment
from alignscope.model import SoftmaxCrossEntropy, per_example_backward
from oracles import pearson_direct, perceptron_separable, spearman_direct


def small(**kw):
    base = dict(
        num_classes=3,
        train_per_class=30,
        test_per_class=10,
        input_dim=6,
        center_scale=1.0,
        noise=0.5,
        hidden_sizes=[24],
        sigma=0.5,
        lr=0.05,
        batch_size=16,
        max_steps=40,
        metric_every=10,
        metric_sample=45,
        er_draws=16,
    )
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError, match="metric_every"):
        small(metric_every=0)
    with pytest.raises(ConfigError, match="activation"):
        small(activation="tanh")
    with pytest.raises(ConfigError, match="lr_multipliers"):
        small(lr_multipliers=[1.0])
    with pytest.raises(ConfigError, match="unknown field 'hiden_sizes'"):
        RunConfig.from_dict({"hiden_sizes": [3]})
    with pytest.raises(ConfigError, match="'sigma': expected a number"):
        RunConfig.from_dict({"sigma": "big"})
    assert RunConfig.from_dict({"sigma": 2}).sigma == 2.0


def test_config_files(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('sigma = 0.5\nhidden_sizes = [16, 8]\nactivation = "relu"\n')
    c = load_config(p)
    assert c.sigma == 0.5 and c.hidden_sizes == [16, 8] and c.activation == "relu"
    p.write_text('sigma = 0.5\nactivation = "relu\n')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    out = tmp_path / "back.toml"
    harness.dump_config(c, out)
    assert load_config(out) == c


def test_run_outputs_and_determinism(tmp_path):
    a = train(small(out_dir=str(tmp_path / "a")))
    b = train(small(out_dir=str(tmp_path / "b")))
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "metrics.csv").read_bytes()
    ca, cb = load_config(tmp_path / "a" / "config.toml"), load_config(tmp_path / "b" / "config.toml")
    assert dataclasses.replace(ca, out_dir="") == dataclasses.replace(cb, out_dir="")
    lines = csv_a.decode().splitlines()
    assert lines[0] == f"# {harness.CSV_VERSION}" and lines[1] == ",".join(COLUMNS)
    assert load_config(tmp_path / "a" / "config.toml") == small(out_dir=str(tmp_path / "a"))
    rows = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    assert [r["step"] for r in rows] == [r["step"] for r in a.records]
    assert rows[0]["step"] == 0
    for r in a.records:
        assert 0 <= r["train_acc"] <= 1 and 0 <= r["test_acc"] <= 1
        for c in COLUMNS:
            if c.startswith("omega") and r[c] is not None:
                assert r[c] <= 1 + 1e-12
    assert a.to_csv() == b.to_csv()


def test_zero_learning_rate_keeps_everything_constant():
    log = train(small(lr=0.0, stop_at_perfect=False))
    first = {k: v for k, v in log.records[0].items() if k != "step"}
    for r in log.records[1:]:
        rest = {k: v for k, v in r.items() if k != "step"}
        # only the pair-sampled and sign-sampled statistics draw fresh randomness
        for key in ("stiffness", "confusion", "er_mean", "er_std"):
            rest.pop(key), first.pop(key, None)
        assert rest == {k: v for k, v in first.items() if k in rest}
    assert log.steps == 40


def test_linear_softmax_fits_separable_blobs():
    cfg = small(num_classes=2, center_scale=3.0, noise=0.3, activation="linear", sigma=0.05, max_steps=2000, lr=0.05)
    train_ds, _ = harness.build_datasets(cfg, harness.Rng(cfg.seed).child("data"))
    assert perceptron_separable(train_ds.inputs, train_ds.labels)
    log = train(cfg)
    assert log.final_train_acc() >= 0.99
    assert log.records[-1]["train_acc"] == 1.0 and log.steps < cfg.max_steps


def test_stops_at_perfect_training_accuracy():
    log = train(small(center_scale=3.0, noise=0.2, max_steps=500))
    accs = [r["train_acc"] for r in log.records]
    assert accs[-1] == 1.0 and all(a < 1.0 for a in accs[:-1])
    assert log.steps == log.records[-1]["step"]
    log = train(small(center_scale=3.0, noise=0.2, max_steps=60, stop_at_perfect=False))
    assert log.steps == 60 and log.records[-1]["step"] == 60


def test_undefined_metrics_are_empty_cells():
    log = train(small(sigma=0.0, max_steps=0))
    r = log.records[0]
    assert r["omega_inclass_rep"] is None and r["omega_inclass_top"] is None
    row = log.to_csv().splitlines()[2].split(",")
    assert row[COLUMNS.index("omega_inclass_rep")] == "" and row[COLUMNS.index("omega_inclass_top")] == ""
    assert r["omega_inclass_hidden"] is not None


def test_metrics_match_materialized_gradients():
    cfg = small(max_steps=0)
    log = train(cfg)
    rng = harness.Rng(cfg.seed)
    tr, _ = harness.build_datasets(cfg, rng.child("data"))
    idx = np.sort(rng.child("metric_sample").choice(tr.n, size=cfg.metric_sample, replace=False))
    g = per_example_backward(log.params, tr.inputs[idx], tr.labels[idx], SoftmaxCrossEntropy())
    flat = g.flat("whole")
    rec = log.records[0]
    assert rec["omega_inclass_whole"] == pytest.approx(class_alignment(flat, tr.labels[idx], 3).omega_in_class, rel=1e-9)
    assert rec["omega_inclass_hidden"] == pytest.approx(class_alignment(g.flat("hidden"), tr.labels[idx], 3).omega_in_class, rel=1e-9)
    w1_grad = g.layer_grads(0).mean(axis=0)
    assert rec["grad_w1_over_w1"] == pytest.approx(np.linalg.norm(w1_grad) / np.linalg.norm(log.params.layers[0]), rel=1e-12)


def test_layer_learning_rate_multipliers_freeze():
    cfg = small(lr_multipliers=[0.0, 1.0], stop_at_perfect=False, max_steps=5)
    log = train(cfg)
    init = train(dataclasses.replace(cfg, max_steps=0)).params
    assert log.params.layers[0].tobytes() == init.layers[0].tobytes()
    assert not np.array_equal(log.params.layers[1], init.layers[1])


def test_divergence_is_recorded(tmp_path):
    cfg = small(loss="squared", activation="linear", sigma=3.0, lr=50.0, metric_every=1, stop_at_perfect=False, out_dir=str(tmp_path))
    with np.errstate(all="ignore"):
        log = train(cfg)
    assert log.diverged is not None and log.steps < cfg.max_steps
    assert "# diverged:" in (tmp_path / "metrics.csv").read_text()


def test_correlation_examples():
    assert correlation([(1, 2), (2, 4), (3, 6), (4, 8)])[0] == pytest.approx(1.0)
    assert correlation([(1, 9), (2, 5), (3, 4), (4, 1)])[1] == pytest.approx(-1.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 30))
        pts = rng.normal(size=(n, 2))
        pts[: n // 3, 1] = pts[0, 1]  # ties
        p, s = correlation(pts)
        assert p == pytest.approx(pearson_direct(list(pts[:, 0]), list(pts[:, 1])), abs=1e-12)
        assert s == pytest.approx(spearman_direct(list(pts[:, 0]), list(pts[:, 1])), abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        correlation([(1, 1), (2, 1), (3, 1)])
    with pytest.raises(InvalidParameterError):
        correlation([(1, 1), (2, 2)])


def test_sweep_aggregates_and_failures(tmp_path):
    with pytest.raises(InvalidParameterError):
        sweep(small(), [0.5])
    res = sweep(small(out_dir=str(tmp_path)), [0.5, 0.5])
    assert res.rows[0] == res.rows[1]
    assert (tmp_path / "sweep.json").exists()
    assert res.trends["test_acc_nonincreasing"] is True and res.trends["test_acc_decreasing"] is False
    with np.errstate(all="ignore"):
        res = sweep(small(loss="squared", activation="linear", lr=50.0, metric_every=1), [0.01, 3.0, 0.5])
    assert res.rows[1]["error"] and len(res.rows) == 3


def test_parallel_sweep_matches_sequential(monkeypatch):
    seq = sweep(small(), [0.1, 1.0])
    monkeypatch.setenv("ALIGNSCOPE_THREADS", "2")
    par = sweep(small(), [0.1, 1.0])
    assert seq.to_json() == par.to_json()
    monkeypatch.setenv("ALIGNSCOPE_THREADS", "many")
    with pytest.raises(ConfigError):
        harness.worker_count()


def test_relu_sweep_alignment_trend():
    res = sweep(RunConfig(activation="relu", metric_every=100), [0.05, 0.5, 5.0])
    # test accuracy saturates on the blobs, so ties are expected and reported
    assert res.trends["test_acc_nonincreasing"] is True
    assert res.trends["omega_decreasing"] is True
    assert all(r["final_train_acc"] == 1.0 for r in res.rows)
