"""Command line entry point: ``gnnrrm <subcommand> --config <path|preset> [--seed N] [--out DIR]``.

Exit code is 0 only if every requested stage succeeds; failures print a
``[stage] message`` line to stderr and exit 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, persist
from .scenario import Dataset

EQUIV_TOL = 1e-9


def _paths(out: Path):
    return {"train": out / "data" / "train.bin", "test": out / "data" / "test.bin", "ckpt": out / "model.ckpt"}


def _load_or_make(cfg, out: Path) -> tuple[Dataset, Dataset]:
    p = _paths(out)
    if p["train"].exists() and p["test"].exists():
        return persist.load_dataset(p["train"]), persist.load_dataset(p["test"])
    return harness.datasets(cfg)


def cmd_gen_data(cfg, out: Path):
    train, test = harness.datasets(cfg)
    p = _paths(out)
    p["train"].parent.mkdir(parents=True, exist_ok=True)
    persist.save_dataset(train, p["train"])
    persist.save_dataset(test, p["test"])
    print(f"wrote {len(train)} train / {len(test)} test instances to {p['train'].parent}")


def cmd_train(cfg, out: Path):
    train, test = harness._stage("gen-data", _load_or_make, cfg, out)
    params, curve = harness._stage("train", harness.train_model, cfg, train, test, lambda r: print(json.dumps(r)))
    persist.save_checkpoint(params, _paths(out)["ckpt"])
    persist.write_csv(curve, out / "training_curve.csv", ["epoch", "mean_loss", "test_ratio"])
    print(f"checkpoint: {_paths(out)['ckpt']}")


def _checkpoint(out: Path):
    path = _paths(out)["ckpt"]
    if not path.exists():
        raise harness.StageError("eval", f"no checkpoint at {path}; run `train` first")
    return persist.load_checkpoint(path)


def cmd_eval(cfg, out: Path):
    params = harness._stage("eval", _checkpoint, out)
    train, test = harness._stage("gen-data", _load_or_make, cfg, out)
    results, timings = harness._stage("eval", harness.evaluate_methods, cfg, params, test, train)
    persist.write_csv(results, out / "results.csv")
    persist.write_csv(timings, out / "timings.csv", persist.TIMING_FIELDS)
    if harness.WMMSE_SHARED in cfg.baselines:
        rows = harness.layer_curve(params, test, cfg.shared_init_iters)
        persist.write_csv(rows, out / "layer_curve.csv", ["step", "wcgcn", "wmmse"])
    persist.write_json({"config": cfg.to_dict(), "results": results}, out / "summary.json")
    sys.stdout.write(persist.rows_to_csv(results))


def cmd_sweep(cfg, out: Path):
    params = harness._stage("sweep", _checkpoint, out)
    rows = harness._stage("sweep", harness.generalization_sweep, cfg, params)
    fields = ["setting", "K", "area_side", "ratio", "delta"]
    persist.write_csv(rows, out / "sweep.csv", fields)
    sys.stdout.write(persist.rows_to_csv(rows, fields))


def cmd_bench(cfg, out: Path):
    b = cfg.bench
    ckpt = _paths(out)["ckpt"]
    params = persist.load_checkpoint(ckpt) if ckpt.exists() else harness.init_params(cfg)
    rows, summary = harness._stage(
        "bench", harness.benchmark_timing, params, tuple(b.get("Ks", (10, 20, 40, 80, 160))),
        int(b.get("reps", 20)), cfg.system, int(b.get("base_K", cfg.system.num_pairs)),
        cfg.wmmse_iters, cfg.seed, int(b.get("nodes_per_batch", 1280)))
    persist.write_csv(rows, out / "bench.csv", ["method", "K", "batch", "mean_edges", "reps", "median_time",
                                                "std_time", "high_variance"])
    persist.write_json(summary, out / "bench.json")
    print(json.dumps(summary, indent=1))


def cmd_equiv_check(cfg, out: Path):
    rows = harness._stage("equiv-check", harness.equivalence_check, cfg)
    fields = ["instance", "K", "Nt", "T", "max_abs_dV", "abs_dobjective"]
    persist.write_csv(rows, out / "equiv.csv", fields)
    worst = max(r["max_abs_dV"] for r in rows)
    print(f"{len(rows)} runs, max |dV| = {worst:.3e}")
    if not worst <= EQUIV_TOL:
        raise harness.StageError("equiv-check", f"max |dV| {worst:.3e} exceeds {EQUIV_TOL:g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "equiv-check": cmd_equiv_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gnnrrm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file or preset name")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
        sp.add_argument("--out", default="out", help="artifact directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("[config] --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        cfg = harness.load_config(args.config, args.seed)
    except Exception as exc:  # noqa: BLE001
        print(f"[config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except harness.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"[{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
