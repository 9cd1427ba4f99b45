"""Command-line entry point: ``alignscope {train,sweep,verify-kernel,verify-bounds,metrics}``.

Exit codes: 0 success, 1 a check or run failed, 2 bad usage, config or I/O.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import bounds, dataio, harness, kernelcheck
from .errors import AlignscopeError, ConfigError, FormatError, InvalidParameterError
from .metrics import DEFAULT_PAIR_BUDGET, VectorSet
from .numkit import Rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alignscope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and log metrics")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides out_dir in the config)")

    s = sub.add_parser("sweep", help="train once per initialization scale")
    s.add_argument("--config", required=True)
    s.add_argument("--sigmas", required=True, type=_floats)
    s.add_argument("--out", help="output directory (overrides out_dir in the config)")

    k = sub.add_parser("verify-kernel", help="Monte-Carlo check of the sin and random-feature kernels")
    k.add_argument("--sigmas", type=_floats, default=list(kernelcheck.GRID_SIGMAS))
    k.add_argument("--distances", type=_floats, default=list(kernelcheck.GRID_DISTANCES))
    k.add_argument("--h", type=int, default=64)
    k.add_argument("--draws", type=int, default=10_000)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", help="CSV path (default stdout)")

    b = sub.add_parser("verify-bounds", help="coverage experiment for the concentration bounds")
    b.add_argument("--trials", type=int, default=2000)
    b.add_argument("--delta", type=float, default=0.1)
    b.add_argument("--n", type=int, default=256)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--bounds", type=_names, default=list(bounds.BOUND_IDS))
    b.add_argument("--truths", type=_names, default=["orthonormal", "clipped_gaussian"])
    b.add_argument("--out", help="JSON-lines path (default stdout)")

    m = sub.add_parser("metrics", help="run the metric suite on a gradient dump")
    m.add_argument("--grads", required=True)
    m.add_argument("--pair-budget", type=int, default=DEFAULT_PAIR_BUDGET)
    m.add_argument("--er-draws", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    return p


def default_truths() -> dict:
    d = 16
    x = np.where(np.arange(d) % 2 == 0, 2.2, -2.2)
    return {
        "orthonormal": bounds.orthonormal_feature_truth(d, x),
        "clipped_gaussian": bounds.clipped_gaussian_truth(),
    }


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_train(args) -> int:
    config = harness.load_config(args.config)
    if args.out:
        config.out_dir = args.out
    log = harness.train(config)
    summary = {
        "steps": log.steps,
        "records": len(log.records),
        "final_train_acc": log.final_train_acc() if log.records else None,
        "best_test_acc": log.best_test_acc() if log.records else None,
        "diverged": log.diverged,
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_FAIL if log.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    config = harness.load_config(args.config)
    if args.out:
        config.out_dir = args.out
    result = harness.sweep(config, args.sigmas)
    print(result.to_json())
    return EXIT_FAIL if any(r.get("error") for r in result.rows) else EXIT_OK


def cmd_verify_kernel(args) -> int:
    rows = kernelcheck.kernel_grid(args.sigmas, args.distances, args.h, args.draws, args.seed)
    f = _open_out(args.out)
    try:
        w = csv.DictWriter(f, fieldnames=kernelcheck.GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "estimate": repr(r["estimate"]), "se": repr(r["se"]), "bound": repr(r["bound"])})
    finally:
        if f is not sys.stdout:
            f.close()
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL


def cmd_verify_bounds(args) -> int:
    truths = default_truths()
    unknown = [t for t in args.truths if t not in truths]
    if unknown:
        raise ConfigError(f"unknown truth {unknown[0]!r}; expected one of {sorted(truths)}")
    root = Rng(args.seed).child("verify_bounds")
    f = _open_out(args.out)
    ok = True
    try:
        for name in args.truths:
            for bid in args.bounds:
                rep = bounds.run_coverage(bid, truths[name], args.n, args.delta, args.trials, root.child(f"{name}/{bid}"))
                ok &= rep.holds
                f.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    finally:
        if f is not sys.stdout:
            f.close()
    return EXIT_OK if ok else EXIT_FAIL


def dump_metrics(dump: dataio.GradDump, seed: int = 0, pair_budget: int = DEFAULT_PAIR_BUDGET, er_draws: int = 64) -> dict:
    vs = VectorSet(dump.grads, dump.labels)
    return harness.metric_suite(vs, dump.k, Rng(seed).child("metrics_cli"), pair_budget, er_draws)


def cmd_metrics(args) -> int:
    dump = dataio.read_grad_dump(args.grads)
    print(json.dumps(dump_metrics(dump, args.seed, args.pair_budget, args.er_draws), sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "verify-kernel": cmd_verify_kernel,
    "verify-bounds": cmd_verify_bounds,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, OSError) as e:
        print(f"alignscope: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidParameterError as e:
        print(f"alignscope: invalid parameter: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AlignscopeError as e:
        print(f"alignscope: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
