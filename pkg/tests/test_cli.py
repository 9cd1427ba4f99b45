import csv
import io
import json

import numpy as np
import pytest

from alignscope import cli, dataio, harness
from alignscope.metrics import VectorSet
from alignscope.numkit import Rng

SMALL = """
num_classes = 3
train_per_class = 20
test_per_class = 10
input_dim = 5
center_scale = 2.0
noise = 0.3
hidden_sizes = [16]
sigma = 0.5
lr = 0.05
batch_size = 16
max_steps = 30
metric_every = 10
metric_sample = 30
er_draws = 8
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_train_command(tmp_path, capsys):
    code = cli.main(["train", "--config", write(tmp_path, SMALL), "--out", str(tmp_path / "run")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["diverged"] is None and summary["records"] >= 1
    assert (tmp_path / "run" / "metrics.csv").exists() and (tmp_path / "run" / "config.toml").exists()


def test_malformed_config_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--config", write(tmp_path, 'sigma = 0.5\nloss = "hinge\n')]) == 2
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["train", "--config", write(tmp_path, "sigma = -1.0\n")]) == 2
    assert "'sigma'" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "none.toml")]) == 2


def test_usage_errors_exit_2(capsys):
    assert cli.main(["train", "--bogus"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["verify-kernel", "--sigmas", "a,b"]) == 2
    assert "usage" in capsys.readouterr().err


def test_sweep_command(tmp_path, capsys):
    code = cli.main(["sweep", "--config", write(tmp_path, SMALL), "--sigmas", "0.1,1.0", "--out", str(tmp_path / "sw")])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert [r["sigma"] for r in out["rows"]] == [0.1, 1.0]
    assert json.loads((tmp_path / "sw" / "sweep.json").read_text()) == out


def test_verify_kernel_command(tmp_path):
    out = tmp_path / "k.csv"
    code = cli.main(["verify-kernel", "--sigmas", "1", "--distances", "0.5,2", "--draws", "2000", "--h", "8", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert list(rows[0]) == list(cli.kernelcheck.GRID_COLUMNS)
    assert len(rows) == 5 and all(r["pass"] == "True" for r in rows)


def test_verify_bounds_command(tmp_path, capsys):
    code = cli.main(["verify-bounds", "--trials", "200", "--bounds", "bennett_direction,dim_variance", "--truths", "clipped_gaussian"])
    assert code == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [l["bound"] for l in lines] == ["bennett_direction", "dim_variance"]
    assert all(l["trials"] == 200 and l["verdict"] == "holds" for l in lines)
    assert cli.main(["verify-bounds", "--truths", "nope"]) == 2


def test_metrics_command_matches_in_process(tmp_path, capsys):
    g = Rng(0).normal(size=(40, 12)) + 0.3
    y = np.repeat(np.arange(4), 10)
    path = tmp_path / "g.pegd"
    dataio.write_grad_dump(path, g, y, 4)
    assert cli.main(["metrics", "--grads", str(path), "--seed", "3"]) == 0
    got = json.loads(capsys.readouterr().out)
    expect = harness.metric_suite(VectorSet(g, y), 4, Rng(3).child("metrics_cli"))
    assert got == json.loads(json.dumps(expect))
    path.write_bytes(b"nope")
    assert cli.main(["metrics", "--grads", str(path)]) == 2
