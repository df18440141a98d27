"""Experiment plumbing: datasets, training, evaluation against baselines,
generalization sweeps and timing benchmarks.

Every random draw is keyed off the experiment seed with a fixed stream id, so
a rerun with the same config and seed rewrites identical ``results.csv``
files.  Wall-clock numbers never enter that file; they go to
``timings.csv``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import nngrad as ng
from . import persist, wcgcn, wmmse
from .graph import build_graph, weighted_sum_rate
from .mbdla import equivalence_report
from .scenario import RAYLEIGH, Dataset, SystemConfig, make_dataset, sample_rng

# stream ids under the experiment seed
TRAIN_STREAM = 0
TEST_STREAM = 1
INIT_STREAM = 100
SHUFFLE_STREAM = 101
WMMSE_STREAM = 102
BENCH_STREAM = 200
SWEEP_STREAM = 300

WCGCN = "wcgcn"
WMMSE = "wmmse"
STRONGEST = "strongest"
WMMSE_SHARED = "wmmse-shared-init"
BASELINES = (WMMSE, STRONGEST, WMMSE_SHARED)
STRONGEST_GRID = tuple(np.round(np.arange(0.1, 1.01, 0.1), 2))


class StageError(RuntimeError):
    """Failure inside a named pipeline stage; ``str()`` starts with the stage tag."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    name: str
    system: SystemConfig
    model: dict = field(default_factory=dict)  # beta, num_layers, mlp1, mlp2, features, aggregator
    training: dict = field(default_factory=dict)  # n_train, epochs, batch_size, lr, lr_schedule
    baselines: list = field(default_factory=lambda: [WMMSE, STRONGEST])
    n_test: int = 500
    wmmse_iters: int = wmmse.DEFAULT_ITERS
    shared_init_iters: int = 10
    strongest_proportion: float | None = None
    sweep: list = field(default_factory=list)  # [{"label": ..., "system": {overrides}}]
    bench: dict = field(default_factory=dict)  # Ks, reps, base_K, nodes_per_batch
    equiv: dict = field(default_factory=dict)  # n_instances, Ks, Nts, iters
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.baselines) - set(BASELINES)
        if unknown:
            raise ValueError(f"unknown baselines {sorted(unknown)}")
        if self.n_test < 1:
            raise ValueError("n_test must be >= 1")

    @property
    def n_train(self) -> int:
        return int(self.training.get("n_train", 10000))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["system"] = self.system.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["system"] = SystemConfig.from_dict(d["system"])
        return cls(**d)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("gnnrrm.presets").iterdir() if p.name.endswith(".json"))


def load_config(path_or_name, seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config file, or a shipped preset by name."""
    p = Path(str(path_or_name))
    if p.is_file():
        d = json.loads(p.read_text())
    else:
        name = str(path_or_name)
        res = resources.files("gnnrrm.presets").joinpath(name + ".json")
        if not res.is_file():
            raise FileNotFoundError(f"no config file or preset named {name!r}; presets: {preset_names()}")
        d = json.loads(res.read_text())
    cfg = ExperimentConfig.from_dict(d)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


# -- data and model -----------------------------------------------------------------

def datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train = make_dataset(cfg.system, cfg.n_train, cfg.seed, TRAIN_STREAM)
    test = make_dataset(cfg.system, cfg.n_test, cfg.seed, TEST_STREAM)
    return train, test


def init_params(cfg: ExperimentConfig, candidate: int = 0) -> wcgcn.WcgcnParams:
    m = cfg.model
    return wcgcn.init_wcgcn(cfg.system.num_tx_antennas, sample_rng(cfg.seed, candidate, INIT_STREAM),
                            beta=m.get("beta"), num_layers=m.get("num_layers", 3),
                            mlp1=m.get("mlp1"), mlp2=m.get("mlp2"),
                            features=m.get("features"), aggregator=m.get("aggregator", "max"))


def wmmse_reference(ds: Dataset, iters: int, seed: int, stream: int = WMMSE_STREAM) -> np.ndarray:
    """Per-instance WMMSE objective from seeded random starts (the ratio denominator)."""
    K, nt = ds.cfg.num_pairs, ds.cfg.num_tx_antennas
    V0 = wmmse.random_init(sample_rng(seed, 0, stream), (len(ds), K, nt), ds.cfg.pmax)
    _, traj = wmmse.wmmse_batch(ds.H, ds.weights, ds.noise, ds.cfg.pmax, V0, iters)
    return traj[:, -1]


def train_model(cfg: ExperimentConfig, train: Dataset, test: Dataset | None = None, log=None):
    """Train from the seeded init; returns (params, curve rows).

    With ``init_candidates`` > 1 each candidate init trains for
    ``probe_epochs`` and the one with the lowest training loss continues.
    """
    t = cfg.training
    epochs = int(t.get("epochs", 20))
    n_cand = int(t.get("init_candidates", 1))
    probe = min(int(t.get("probe_epochs", 1)), epochs) if n_cand > 1 else 0
    kw = dict(batch_size=int(t.get("batch_size", 64)), lr=float(t.get("lr", 1e-3)),
              lr_schedule=t.get("lr_schedule"))
    params = init_params(cfg)
    prepared = wcgcn.prepare_dataset(params, train)
    ref = None
    if test is not None:
        ref = wmmse_reference(test, cfg.wmmse_iters, cfg.seed).mean()
        prep_test = wcgcn.prepare_dataset(params, test)

    def recorder(rows, live):
        def callback(epoch, loss, p):
            row = {"epoch": epoch + 1, "mean_loss": loss}
            if ref is not None:
                row["test_ratio"] = float(wcgcn.evaluate(p, test, prep_test).mean() / ref)
            rows.append(row)
            if live and log is not None:
                log(row)
        return callback

    best = None
    for c in range(n_cand if probe else 0):
        rows, adam = [], ng.AdamState()
        rng = sample_rng(cfg.seed, c, SHUFFLE_STREAM)
        p, curve = wcgcn.train(init_params(cfg, c), train, epochs=probe, rng=rng, prepared=prepared,
                               adam=adam, callback=recorder(rows, False), **kw)
        if best is None or curve[-1] < best[0]:
            best = (curve[-1], p, adam, rng, rows)
    if best is None:
        rows, adam, rng = [], ng.AdamState(), sample_rng(cfg.seed, 0, SHUFFLE_STREAM)
    else:
        _, params, adam, rng, rows = best
        if log is not None:
            for r in rows:
                log(r)
    params, _ = wcgcn.train(params, train, epochs=epochs, rng=rng, prepared=prepared, adam=adam,
                            callback=recorder(rows, True), start_epoch=probe, **kw)
    return params, rows


def tune_strongest(ds: Dataset, grid=STRONGEST_GRID) -> float:
    """Proportion of active links that maximizes the mean objective on ``ds``."""
    scores = [weighted_sum_rate(wmmse.strongest_beams(ds.H, ds.cfg.pmax, rho), ds.H, ds.weights,
                                ds.noise).mean() for rho in grid]
    return float(grid[int(np.argmax(scores))])


# -- evaluation --------------------------------------------------------------------

def evaluate_methods(cfg: ExperimentConfig, params, test: Dataset, train: Dataset | None = None,
                     setting: str = "test"):
    """Result rows and timing rows for WCGCN and the configured baselines on ``test``."""
    K = test.cfg.num_pairs
    pmax = test.cfg.pmax
    results, timings = [], []

    t0 = time.perf_counter()
    ref_obj = wmmse_reference(test, cfg.wmmse_iters, cfg.seed)
    t_ref = time.perf_counter() - t0
    ref = float(ref_obj.mean())

    def add(method, obj, seconds):
        results.append({"method": method, "K": K, "setting": setting,
                        "mean_objective": float(np.mean(obj)), "ratio": float(np.mean(obj) / ref)})
        timings.append({"method": method, "K": K, "setting": setting,
                        "wall_time_mean": seconds / len(test), "wall_time_std": 0.0})

    if params is not None:
        t0 = time.perf_counter()
        obj = wcgcn.evaluate(params, test)
        add(WCGCN, obj, time.perf_counter() - t0)
    if WMMSE in cfg.baselines:
        add(WMMSE, ref_obj, t_ref)
    if STRONGEST in cfg.baselines:
        rho = cfg.strongest_proportion
        if rho is None:
            rho = tune_strongest(train if train is not None else test)
        t0 = time.perf_counter()
        V = wmmse.strongest_beams(test.H, pmax, rho)
        obj = weighted_sum_rate(V, test.H, test.weights, test.noise)
        add(STRONGEST, obj, time.perf_counter() - t0)
    if WMMSE_SHARED in cfg.baselines:
        t0 = time.perf_counter()
        V0 = wmmse.half_power_init((len(test), K, test.cfg.num_tx_antennas), pmax)
        _, traj = wmmse.wmmse_batch(test.H, test.weights, test.noise, pmax, V0, cfg.shared_init_iters)
        add(f"{WMMSE_SHARED}-{cfg.shared_init_iters}it", traj[:, -1], time.perf_counter() - t0)
    return results, timings


def layer_curve(params, test: Dataset, iters: int) -> list[dict]:
    """Mean objective after each WCGCN layer and each WMMSE iteration from the shared start."""
    K, nt, pmax = test.cfg.num_pairs, test.cfg.num_tx_antennas, test.cfg.pmax
    V0 = wmmse.half_power_init((len(test), K, nt), pmax)
    _, traj = wmmse.wmmse_batch(test.H, test.weights, test.noise, pmax, V0, iters)
    prepared = wcgcn.prepare_dataset(params, test)
    rows = []
    for k in range(max(iters, params.num_layers) + 1):
        row = {"step": k, "wmmse": float(traj[:, k].mean()) if k <= iters else ""}
        if k == 0:
            row["wcgcn"] = float(weighted_sum_rate(V0, test.H, test.weights, test.noise).mean())
        elif k <= params.num_layers:
            row["wcgcn"] = float(wcgcn.evaluate(params, test, prepared, num_layers=k).mean())
        else:
            row["wcgcn"] = ""
        rows.append(row)
    return rows


# -- sweeps and benchmarks ---------------------------------------------------------

def generalization_sweep(cfg: ExperimentConfig, params, base_ratio: float | None = None) -> list[dict]:
    """Evaluate one checkpoint on every ``cfg.sweep`` entry; delta is vs the training-size ratio."""
    if params.num_tx_antennas != cfg.system.num_tx_antennas:
        raise ValueError("checkpoint and config disagree on Nt")
    if base_ratio is None:
        test = make_dataset(cfg.system, cfg.n_test, cfg.seed, TEST_STREAM)
        base_ratio = _wcgcn_ratio(cfg, params, test)
    rows = [{"setting": "train-size", "K": cfg.system.num_pairs, "area_side": cfg.system.area_side,
             "ratio": base_ratio, "delta": 0.0}]
    for n, entry in enumerate(cfg.sweep):
        sys_cfg = cfg.system.replace(**entry.get("system", {}))
        if sys_cfg.num_tx_antennas != params.num_tx_antennas:
            raise ValueError(f"sweep entry {entry.get('label', n)}: Nt mismatch with checkpoint")
        test = make_dataset(sys_cfg, int(entry.get("n_test", cfg.n_test)), cfg.seed, SWEEP_STREAM + n)
        ratio = _wcgcn_ratio(cfg, params, test)
        rows.append({"setting": entry.get("label", f"sweep-{n}"), "K": sys_cfg.num_pairs,
                     "area_side": sys_cfg.area_side, "ratio": ratio, "delta": ratio - base_ratio})
    return rows


def _wcgcn_ratio(cfg, params, test) -> float:
    ref = wmmse_reference(test, cfg.wmmse_iters, cfg.seed).mean()
    return float(wcgcn.evaluate(params, test).mean() / ref)


def loglog_slope(Ks, times) -> float:
    return float(np.polyfit(np.log(np.asarray(Ks, float)), np.log(np.asarray(times, float)), 1)[0])


def benchmark_timing(params, Ks=(10, 20, 40, 80, 160), reps: int = 20, base: SystemConfig | None = None,
                     base_K: int = 10, wmmse_iters: int = wmmse.DEFAULT_ITERS, seed: int = 0,
                     nodes_per_batch: int = 1280):
    """Median per-instance wall time per method and K at fixed density.

    The area grows with sqrt(K) so that K / area stays at ``base``.  Each
    timed call solves a batch of ``nodes_per_batch // K`` instances (at least
    one) with both methods, and the time is divided by the batch size, so the
    interpreter overhead per call is amortized the same way for both;
    ``nodes_per_batch=0`` times single instances.  Returns (rows, summary)
    where summary holds the log-log slopes and the WMMSE/WCGCN time ratios.
    """
    base = base if base is not None else SystemConfig(num_pairs=base_K)
    rows = []
    for n, K in enumerate(Ks):
        side = base.area_side * math.sqrt(K / base_K)
        sys_cfg = base.replace(num_pairs=K, area_side=side)
        B = max(1, nodes_per_batch // K) if nodes_per_batch else 1
        ds = make_dataset(sys_cfg, B, seed, BENCH_STREAM + n)
        graphs = [build_graph(sys_cfg, inst.scenario, inst.channel) for inst in ds]
        V0 = wmmse.half_power_init((B, K, sys_cfg.num_tx_antennas), sys_cfg.pmax)
        samples = {WCGCN: [], WMMSE: []}
        for _ in range(reps):
            t0 = time.perf_counter()
            wcgcn.infer_batch(params, graphs, sys_cfg.pmax)
            samples[WCGCN].append((time.perf_counter() - t0) / B)
            t0 = time.perf_counter()
            wmmse.wmmse_batch(ds.H, ds.weights, ds.noise, sys_cfg.pmax, V0, wmmse_iters, track=False)
            samples[WMMSE].append((time.perf_counter() - t0) / B)
        edges = float(np.mean([g.num_edges for g in graphs]))
        for method, s in samples.items():
            rows.append({"method": method, "K": K, "batch": B, "mean_edges": edges, "reps": reps,
                         "median_time": float(np.median(s)), "std_time": float(np.std(s)),
                         "high_variance": reps < 2})
    med = {m: [r["median_time"] for r in rows if r["method"] == m] for m in (WCGCN, WMMSE)}
    ratios = [b / a for a, b in zip(med[WCGCN], med[WMMSE])]
    summary = {
        "Ks": list(Ks),
        "slope": {m: loglog_slope(Ks, med[m]) for m in med},
        "wmmse_over_wcgcn": ratios,
        "ratio_increasing": bool(all(b > a for a, b in zip(ratios, ratios[1:]))),
    }
    return rows, summary


def equivalence_check(cfg: ExperimentConfig) -> list[dict]:
    e = cfg.equiv
    n = int(e.get("n_instances", 50))
    Ks = e.get("Ks", [2, 5, 10])
    Nts = e.get("Nts", [1])
    iters = e.get("iters", [1, 5, 20])
    chans = []
    for i in range(n):
        sys_cfg = SystemConfig(num_pairs=Ks[i % len(Ks)], num_tx_antennas=Nts[i % len(Nts)],
                               channel_model=RAYLEIGH, snr_db=cfg.system.snr_db)
        chans.append(make_dataset(sys_cfg, 1, cfg.seed, 400 + i)[0].channel)
    return equivalence_report(chans, iters, cfg.system.pmax, sample_rng(cfg.seed, 0, WMMSE_STREAM))


# -- whole experiment ----------------------------------------------------------------

def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, out_dir, log=None) -> list[dict]:
    """Data -> train -> eval (-> sweep), writing CSV/JSON/checkpoint artifacts to ``out_dir``."""
    out = Path(out_dir)
    _stage("setup", out.mkdir, parents=True, exist_ok=True)
    train, test = _stage("gen-data", datasets, cfg)
    params, curve = _stage("train", train_model, cfg, train, test, log)
    _stage("train", persist.save_checkpoint, params, out / "model.ckpt")
    _stage("train", persist.write_csv, curve, out / "training_curve.csv", ["epoch", "mean_loss", "test_ratio"])
    results, timings = _stage("eval", evaluate_methods, cfg, params, test, train)
    _stage("eval", persist.write_csv, results, out / "results.csv")
    _stage("eval", persist.write_csv, timings, out / "timings.csv", persist.TIMING_FIELDS)
    summary = {"config": cfg.to_dict(), "results": results}
    if WMMSE_SHARED in cfg.baselines:
        curve_rows = _stage("eval", layer_curve, params, test, cfg.shared_init_iters)
        _stage("eval", persist.write_csv, curve_rows, out / "layer_curve.csv", ["step", "wcgcn", "wmmse"])
    if cfg.sweep:
        base = next(r["ratio"] for r in results if r["method"] == WCGCN)
        sweep = _stage("sweep", generalization_sweep, cfg, params, base)
        _stage("sweep", persist.write_csv, sweep, out / "sweep.csv", ["setting", "K", "area_side", "ratio", "delta"])
        summary["sweep"] = sweep
    _stage("eval", persist.write_json, summary, out / "summary.json")
    return results
