"""Training runs, scale-of-initialization sweeps and metric logging."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import dataio
from .errors import AlignscopeError, ConfigError, InvalidParameterError, NumericError, UndefinedMetricError
from .metrics import (
    DEFAULT_PAIR_BUDGET,
    VectorSet,
    class_alignment,
    cosine_stiffness,
    empirical_rademacher_alignment,
    gradient_confusion,
    gradient_diversity,
    nec,
    representation_alignment,
)
from .model import (
    Activation,
    ModelParams,
    accuracy,
    batch_loss_and_logit_grad,
    forward,
    init_params,
    make_loss,
    per_example_backward,
    sgd_step,
)
from .numkit import Rng

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

CSV_VERSION = "alignscope-metrics/1"
COLUMNS = (
    "step",
    "train_loss",
    "train_acc",
    "test_acc",
    "omega_inclass_hidden",
    "omega_inclass_top",
    "omega_inclass_logit",
    "omega_inclass_whole",
    "omega_inclass_rep",
    "diversity",
    "stiffness",
    "confusion",
    "grad_w1_over_w1",
    "nec",
    "er_mean",
    "er_std",
)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # data
    dataset: str = "blobs"
    num_classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 200
    input_dim: int = 64
    center_scale: float = 0.63
    noise: float = 0.56
    cifar_paths: list = field(default_factory=list)
    cifar_subset: int = 0
    label_shuffle: float = 0.0
    # model
    hidden_sizes: list = field(default_factory=lambda: [1024])
    activation: str = "sin"
    bias: bool = False
    # loss
    loss: str = "softmax"
    temperature: float = 1.0
    margin: float = 1.0
    # init and optimizer
    sigma: float = 1.0
    lr: float = 0.01
    lr_multipliers: list = field(default_factory=list)
    batch_size: int = 256
    max_steps: int = 20000
    stop_at_perfect: bool = True
    # metrics
    metric_every: int = 50
    metric_sample: int = 1024
    pair_budget: int = DEFAULT_PAIR_BUDGET
    er_draws: int = 64
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, name, why):
            if not cond:
                raise ConfigError(f"field {name!r}: {why} (got {getattr(self, name)!r})")

        need(self.dataset in ("blobs", "cifar10"), "dataset", "must be 'blobs' or 'cifar10'")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(self.train_per_class >= 1, "train_per_class", "must be >= 1")
        need(self.test_per_class >= 1, "test_per_class", "must be >= 1")
        need(self.input_dim >= 1, "input_dim", "must be >= 1")
        need(self.center_scale >= 0, "center_scale", "must be >= 0")
        need(self.noise >= 0, "noise", "must be >= 0")
        need(0.0 <= self.label_shuffle <= 1.0, "label_shuffle", "must lie in [0, 1]")
        need(self.cifar_subset >= 0, "cifar_subset", "must be >= 0")
        need(len(self.hidden_sizes) >= 1 and all(h >= 1 for h in self.hidden_sizes), "hidden_sizes", "need one or more positive widths")
        need(self.activation in [a.value for a in Activation], "activation", "unknown activation")
        need(self.loss in ("softmax", "hinge", "squared"), "loss", "must be softmax, hinge or squared")
        need(self.temperature > 0, "temperature", "must be > 0")
        need(self.margin > 0, "margin", "must be > 0")
        need(math.isfinite(self.sigma) and self.sigma >= 0, "sigma", "must be finite and >= 0")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(
            not self.lr_multipliers or len(self.lr_multipliers) == len(self.hidden_sizes) + 1,
            "lr_multipliers",
            "need one multiplier per layer",
        )
        need(all(m >= 0 for m in self.lr_multipliers), "lr_multipliers", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.max_steps >= 0, "max_steps", "must be >= 0")
        need(self.metric_every >= 1, "metric_every", "cadence must be >= 1")
        need(self.metric_sample >= 2, "metric_sample", "must be >= 2")
        need(self.pair_budget >= 1, "pair_budget", "must be >= 1")
        need(self.er_draws >= 1, "er_draws", "must be >= 1")
        need(self.seed >= 0, "seed", "must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown field {key!r}")
            default = known[key].default
            if default is dataclasses.MISSING:
                default = known[key].default_factory()
            kwargs[key] = _coerce(key, value, default)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def layer_lrs(self) -> list[float]:
        mult = self.lr_multipliers or [1.0] * (len(self.hidden_sizes) + 1)
        return [self.lr * m for m in mult]


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"field {key!r}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {key!r}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {key!r}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"field {key!r}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"field {key!r}: expected a list, got {value!r}")
        return list(value)
    return value


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    try:
        return RunConfig.from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_config(config: RunConfig, path) -> None:
    with open(path, "wb") as f:
        tomli_w.dump(config.to_dict(), f)


# ---------------------------------------------------------------------------
# data and metrics
# ---------------------------------------------------------------------------


def build_datasets(config: RunConfig, rng: Rng) -> tuple[dataio.Dataset, dataio.Dataset]:
    if config.dataset == "blobs":
        k, p = config.num_classes, config.input_dim
        centers = dataio.blob_centers(k, p, config.center_scale, rng.child("centers"))
        train = dataio.synth_blobs(k, config.train_per_class, p, config.center_scale, config.noise, rng.child("train"), centers, "train")
        test = dataio.synth_blobs(k, config.test_per_class, p, config.center_scale, config.noise, rng.child("test"), centers, "test")
    else:
        train, test = dataio.load_cifar10(config.cifar_paths, config.cifar_subset or None, rng.child("cifar_subset"))
    if config.label_shuffle > 0:
        train = dataio.shuffle_labels(train, config.label_shuffle, rng.child("label_shuffle"))
    return train, test


def _defined(fn, *args, **kwargs):
    try:
        v = fn(*args, **kwargs)
    except UndefinedMetricError:
        return None
    return v


def _value(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def metric_suite(vs: VectorSet, k: int, rng: Rng, pair_budget: int = DEFAULT_PAIR_BUDGET, er_draws: int = 64) -> dict:
    """Alignment-family statistics of one gradient set; ``None`` marks an undefined value."""
    rep = _defined(class_alignment, vs, k=k) if vs.labels is not None else None
    stiff = _defined(cosine_stiffness, vs, pair_budget, rng.child("stiffness"))
    conf = _defined(gradient_confusion, vs, pair_budget, rng.child("confusion"))
    er = _defined(empirical_rademacher_alignment, vs, er_draws, rng.child("rademacher"))
    return {
        "omega": None if rep is None else _value(rep.omega),
        "omega_inclass": None if rep is None else _value(rep.omega_in_class),
        "diversity": _value(gradient_diversity(vs)),
        "stiffness": None if stiff is None else stiff.value,
        "confusion": None if conf is None else conf.value,
        "nec": _value(_defined(nec, vs)),
        "er_mean": None if er is None else er.mean,
        "er_std": None if er is None else er.std,
    }


def _inclass(gram, labels, k):
    rep = _defined(class_alignment, VectorSet.from_gram(gram, labels), k=k)
    return None if rep is None else rep.omega_in_class


def measure(params: ModelParams, loss, train, test, metric_idx, step: int, config: RunConfig, rng: Rng) -> dict:
    xm, ym = train.inputs[metric_idx], train.labels[metric_idx]
    k = train.k
    grads = per_example_backward(params, xm, ym, loss)
    grams = [grads.layer_gram(l, with_bias=True) for l in range(grads.num_layers)]
    whole = np.sum(grams, axis=0)
    if grads.has_bias:
        hidden, top = grads.layer_gram(0), grads.layer_gram(grads.num_layers - 1)
    else:
        hidden, top = grams[0], grams[-1]
    suite = metric_suite(VectorSet.from_gram(whole, ym), k, rng.child(f"metrics{step}"), config.pair_budget, config.er_draws)
    reps = forward(params, xm).representations
    rep = _defined(representation_alignment, reps, ym, k)

    losses, _ = batch_loss_and_logit_grad(loss, forward(params, train.inputs).logits, train.labels)
    w1 = float(np.linalg.norm(params.layers[0]))
    return {
        "step": step,
        "train_loss": float(losses.mean()),
        "train_acc": accuracy(params, train.inputs, train.labels),
        "test_acc": accuracy(params, test.inputs, test.labels),
        "omega_inclass_hidden": _inclass(hidden, ym, k),
        "omega_inclass_top": _inclass(top, ym, k),
        "omega_inclass_logit": _inclass(grads.logit_grads @ grads.logit_grads.T, ym, k),
        "omega_inclass_whole": suite["omega_inclass"],
        "omega_inclass_rep": None if rep is None else rep.omega_in_class,
        "diversity": suite["diversity"],
        "stiffness": suite["stiffness"],
        "confusion": suite["confusion"],
        "grad_w1_over_w1": float(np.linalg.norm(grads.mean_layer_grad(0))) / w1 if w1 > 0 else None,
        "nec": suite["nec"],
        "er_mean": suite["er_mean"],
        "er_std": suite["er_std"],
    }


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunLog:
    config: RunConfig
    records: list
    params: ModelParams
    steps: int
    diverged: str | None = None

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def best_test_acc(self) -> float:
        return max(r["test_acc"] for r in self.records)

    def final_train_acc(self) -> float:
        return self.records[-1]["train_acc"]

    def time_average(self, name: str) -> float | None:
        vals = [r[name] for r in self.records if r[name] is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        lines = [f"# {CSV_VERSION}", ",".join(COLUMNS)]
        for r in self.records:
            lines.append(",".join(_cell(r[c]) for c in COLUMNS))
        if self.diverged:
            lines.append(f"# diverged: {self.diverged}")
        return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def train(config: RunConfig) -> RunLog:
    """Mini-batch SGD with per-epoch seeded shuffling and periodic metric records.

    A record is taken at step 0 and every ``metric_every`` steps on a fixed
    sample of training examples; the run stops at ``max_steps`` or once a
    record shows training accuracy 1.0 (unless ``stop_at_perfect`` is off).
    A non-finite loss or gradient aborts the run and is recorded in
    ``RunLog.diverged``.
    """
    rng = Rng(config.seed)
    train_ds, test_ds = build_datasets(config, rng.child("data"))
    k, p = train_ds.k, train_ds.dim
    loss = make_loss(config.loss, config.temperature, config.margin)
    params = init_params([p, *config.hidden_sizes, k], Activation(config.activation), config.sigma, rng.child("init"), config.bias)
    lrs = config.layer_lrs()
    m = min(config.metric_sample, train_ds.n)
    metric_idx = np.sort(rng.child("metric_sample").choice(train_ds.n, size=m, replace=False))
    metric_rng = rng.child("metrics")

    records, diverged = [], None
    step, epoch, order, pos = 0, 0, None, 0
    while True:
        if step % config.metric_every == 0 or step == config.max_steps:
            try:
                rec = measure(params, loss, train_ds, test_ds, metric_idx, step, config, metric_rng)
            except NumericError as e:
                diverged = f"step {step}: {e}"
                break
            records.append(rec)
            if not math.isfinite(rec["train_loss"]):
                diverged = f"step {step}: non-finite training loss"
                break
            if config.stop_at_perfect and rec["train_acc"] == 1.0:
                break
        if step >= config.max_steps:
            break
        if order is None or pos >= train_ds.n:
            order = rng.child(f"epoch{epoch}").permutation(train_ds.n)
            epoch, pos = epoch + 1, 0
        batch = order[pos : pos + config.batch_size]
        pos += config.batch_size
        try:
            grads = per_example_backward(params, train_ds.inputs[batch], train_ds.labels[batch], loss)
        except NumericError as e:
            diverged = f"step {step + 1}: {e}"
            break
        params = sgd_step(params, grads.mean_grads(), lrs, grads.mean_bias_grads())
        step += 1

    log = RunLog(config, records, params, step, diverged)
    if config.out_dir:
        write_run(log, config.out_dir)
    return log


def write_run(log: RunLog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(log.to_csv())
    dump_config(log.config, out / "config.toml")


def read_metrics_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {CSV_VERSION}":
        raise ConfigError(f"{path}: missing or unsupported schema header")
    header = lines[1].split(",")
    rows = []
    for line in lines[2:]:
        if line.startswith("#"):
            continue
        cells = line.split(",")
        row = {}
        for name, cell in zip(header, cells):
            row[name] = None if cell == "" else (int(cell) if name == "step" else float(cell))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# sweeps and correlation
# ---------------------------------------------------------------------------


def correlation(pairs) -> tuple[float, float]:
    """Pearson and Spearman coefficients of ``(x, y)`` pairs."""
    a = np.asarray(pairs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] < 3:
        raise InvalidParameterError("need at least 3 (x, y) pairs")
    x, y = a[:, 0], a[:, 1]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetricError("correlation is undefined for a constant coordinate")
    pearson = float(sps.pearsonr(x, y).statistic)
    spearman = float(sps.spearmanr(x, y).statistic)
    return float(np.clip(pearson, -1, 1)), float(np.clip(spearman, -1, 1))


def _trend(values, strict: bool) -> bool | None:
    if any(v is None for v in values) or len(values) < 2:
        return None
    d = np.diff(values)
    return bool(np.all(d < 0)) if strict else bool(np.all(d <= 0))


@dataclass
class SweepResult:
    sigmas: list
    rows: list
    correlation: dict | None
    trends: dict

    def to_json(self) -> str:
        return json.dumps(
            {"sigmas": self.sigmas, "rows": self.rows, "correlation": self.correlation, "trends": self.trends},
            indent=2,
            sort_keys=True,
        )


def _sweep_one(config: RunConfig):
    try:
        log = train(config)
    except AlignscopeError as e:
        return {"sigma": config.sigma, "error": str(e)}
    return {
        "sigma": config.sigma,
        "error": log.diverged,
        "steps": log.steps,
        "best_test_acc": log.best_test_acc(),
        "final_train_acc": log.final_train_acc(),
        "omega_inclass": log.time_average("omega_inclass_whole"),
        "omega_inclass_rep": log.time_average("omega_inclass_rep"),
        "grad_w1_over_w1_init": log.records[0]["grad_w1_over_w1"],
    }


def worker_count() -> int:
    raw = os.environ.get("ALIGNSCOPE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ALIGNSCOPE_THREADS must be an integer, got {raw!r}") from None


def sweep(config: RunConfig, sigmas) -> SweepResult:
    """One training run per sigma with every other setting, seed included, held fixed."""
    sigmas = [float(s) for s in sigmas]
    if len(sigmas) < 2:
        raise InvalidParameterError("a sweep needs at least 2 sigma values")
    configs = []
    for i, s in enumerate(sigmas):
        out = os.path.join(config.out_dir, f"sigma_{i}_{s!r}") if config.out_dir else ""
        configs.append(dataclasses.replace(config, sigma=s, out_dir=out))
    workers = min(worker_count(), len(configs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_sweep_one, configs))
    else:
        rows = [_sweep_one(c) for c in configs]

    ok = [r for r in rows if "best_test_acc" in r]
    corr = None
    pairs = [(r["best_test_acc"], r["omega_inclass"]) for r in ok if r["omega_inclass"] is not None]
    if len(pairs) >= 3:
        try:
            pearson, spearman = correlation(pairs)
            corr = {"pearson": pearson, "spearman": spearman, "pairs": len(pairs)}
        except UndefinedMetricError:
            corr = None
    complete = len(ok) == len(rows)
    acc = [r.get("best_test_acc") for r in rows]
    om = [r.get("omega_inclass") for r in rows]
    trends = {
        "test_acc_nonincreasing": _trend(acc, strict=False) if complete else None,
        "test_acc_decreasing": _trend(acc, strict=True) if complete else None,
        "omega_nonincreasing": _trend(om, strict=False) if complete else None,
        "omega_decreasing": _trend(om, strict=True) if complete else None,
    }
    result = SweepResult(sigmas, rows, corr, trends)
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.out_dir) / "sweep.json").write_text(result.to_json())
    return result
