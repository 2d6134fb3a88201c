"""Seeded experiment runner, ablation sweeps and plot-data emission.

Layout of an output directory::

    manifest.json                 config, config hash, every file with its (config hash, seed)
    config.cfg                    the resolved configuration
    data/<data-hash>/             union.jsonl, nonpref.jsonl, stats.json (reused across runs)
    runs/<algo>/seed<k>/          log.jsonl, policy.json, eval.json
    per_seed.csv                  one row per (algo, seed)
    aggregate.json                per-algo means with bootstrap intervals
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from pathlib import Path

import numpy as np

from .baselines import TRAINERS
from .config import ExperimentConfig, write_kv_file
from .datakit import (
    build_datasets,
    deserialize_dataset,
    file_sha256,
    generate_pool,
    inject_label_noise,
    serialize_dataset,
)
from .diffkit import save_checkpoint
from .envkit import GridHazardWorld, exact_policy_evaluation, hazard_grid_5x5
from .errors import ConfigError, OsilError
from .costmodel import train_cost_model
from .evalkit import (
    References,
    bootstrap_ci,
    compute_references,
    cost_recovery,
    evaluate_policy,
    normalize_metrics,
)
from .policy import train_osil

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "OSIL_OUTPUT_ROOT"
METRICS = (
    "mean_return",
    "mean_cost",
    "cvar20_cost",
    "normalized_return",
    "normalized_cost",
    "normalized_cvar20_cost",
    "exact_return",
    "exact_cost",
)
CSV_FIELDS = ("algo", "seed", "status", *METRICS, "train_seconds", "error")

ABLATION_AXES = {
    "n_nonpref": ("data.n_nonpref", [5, 10, 20, 50]),
    "segment_length": ("train.segment_length", [2, 5, 10, 20, 30]),
    "contrastive": ("train.use_contrastive", [True, False]),
    "alpha_bar": ("train.alpha_bar", [0.0001, 0.001, 0.005, 0.01, 0.1]),
    "union_size": ("data.union_cap", [100, 200, 300, None]),
    "noise": ("data.noise_fraction", [0.0, 0.1, 0.2, 0.5]),
}


def output_root(default="osil_runs") -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    if cfg.output_dir:
        p = Path(cfg.output_dir)
        return p if p.is_absolute() else output_root() / p
    return output_root() / f"{cfg.name}-{cfg.hash()[:12]}"


def make_world(env: dict) -> GridHazardWorld:
    """Default hazard grid, with any keys of ``env`` overriding it."""
    base = hazard_grid_5x5().to_dict()
    base.update(env or {})
    return GridHazardWorld.from_dict(base)


# ---------------------------------------------------------------------------
# datasets


def prepare_datasets(cfg: ExperimentConfig, seed: int, data_root) -> tuple:
    """Build (or reuse) D_U and D_N for ``seed``; keyed by the data hash."""
    world = make_world(cfg.env)
    cmdp = world.compile()
    d = Path(data_root) / cfg.data_hash(seed)[:16]
    u_path, n_path = d / "union.jsonl", d / "nonpref.jsonl"
    if u_path.is_file() and n_path.is_file():
        log.info("reusing datasets in %s", d)
        return deserialize_dataset(u_path), deserialize_dataset(n_path), cmdp, d
    dc = cfg.data
    pool = generate_pool(world, dc.pool_size, np.random.default_rng(seed), dc.random_fraction)
    d_u, d_n = build_datasets(
        pool,
        cmdp.action_space,
        dc.union_return_quantile,
        dc.nonpref_cost_quantile,
        dc.n_nonpref,
        seed=seed,
        union_cap=dc.union_cap,
        remove_nonpref_from_union=dc.remove_nonpref_from_union,
    )
    if dc.noise_fraction > 0:
        d_n = inject_label_noise(d_n, d_u, dc.noise_fraction, seed)
    d.mkdir(parents=True, exist_ok=True)
    hashes = {"union": serialize_dataset(d_u, u_path), "nonpref": serialize_dataset(d_n, n_path)}
    (d / "stats.json").write_text(json.dumps({"union": d_u.stats(), "nonpref": d_n.stats(), "sha256": hashes}, indent=2))
    return d_u, d_n, cmdp, d


# ---------------------------------------------------------------------------
# single runs


def train_algo(algo: str, d_u, d_n, train_cfg, seed: int, evaluator=None, log_every: int = 1000):
    if algo == "osil":
        return train_osil(d_u, d_n, train_cfg, seed, evaluator, log_every)
    if algo not in TRAINERS:
        raise ConfigError(f"unknown algorithm {algo!r}")
    return TRAINERS[algo](d_u, d_n, train_cfg, seed, evaluator=evaluator, log_every=log_every)


def evaluate(cmdp, policy, refs: References, n_eval: int, seed: int) -> dict:
    """Rollout report plus exact expected episodic totals from dynamic programming."""
    report = normalize_metrics(evaluate_policy(cmdp, policy, n_eval, seed), refs).to_dict()
    exact = exact_policy_evaluation(cmdp, policy, mode="finite", gamma=1.0)
    report["exact_return"] = exact.j_reward
    report["exact_cost"] = exact.j_cost
    return report


def make_evaluator(cmdp, refs, n_eval, seed):
    counter = {"k": 0}

    def evaluator(policy):
        counter["k"] += 1
        rep = evaluate(cmdp, policy, refs, n_eval, (seed, counter["k"]))
        return {m: rep[m] for m in METRICS}

    return evaluator


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_single(cfg: ExperimentConfig, algo: str, seed: int, out: Path, data_root: Path, log_every: int = 1000) -> dict:
    d_u, d_n, cmdp, data_dir = prepare_datasets(cfg, seed, data_root)
    refs = compute_references(cmdp, seed=seed)
    train_cfg = cfg.train
    evaluator = make_evaluator(cmdp, refs, train_cfg.n_eval, seed) if train_cfg.eval_every else None
    t0 = time.perf_counter()
    res = train_algo(algo, d_u.learner_view(), d_n.learner_view(), train_cfg, seed, evaluator, log_every)
    elapsed = time.perf_counter() - t0
    run_dir = out / "runs" / algo / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(run_dir / "log.jsonl", res.log)
    meta = {"algo": algo, "seed": seed, "config_hash": cfg.hash()}
    save_checkpoint(run_dir / "policy.json", {"policy": res.policy.net}, meta)
    if res.cost_model is not None:
        save_checkpoint(run_dir / "cost_model.json", {"encoder": res.cost_model.encoder, "head": res.cost_model.head}, meta)
    report = evaluate(cmdp, res.policy, refs, train_cfg.n_eval, seed)
    (run_dir / "eval.json").write_text(json.dumps(report, indent=2))
    return {
        "algo": algo,
        "seed": seed,
        "status": "ok",
        **{m: report[m] for m in METRICS},
        "train_seconds": round(elapsed, 3),
        "error": "",
        "_files": [str(p.relative_to(out)) for p in sorted(run_dir.iterdir())],
        "_data_dir": str(data_dir),
    }


# ---------------------------------------------------------------------------
# experiments


def aggregate(rows: list[dict], n_boot: int = 1000, confidence: float = 0.95, seed: int = 0) -> dict:
    """Per-algo means and bootstrap intervals over the seeds that finished."""
    out = {}
    for algo in dict.fromkeys(r["algo"] for r in rows):
        ok = [r for r in rows if r["algo"] == algo and r["status"] == "ok"]
        failed = [r["seed"] for r in rows if r["algo"] == algo and r["status"] != "ok"]
        if failed:
            warnings.warn(f"{algo}: aggregating without failed seeds {failed}", RuntimeWarning, stacklevel=2)
        entry = {"n_seeds": len(ok), "failed_seeds": failed}
        for m in METRICS:
            vals = [float(r[m]) for r in ok]
            if not vals:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                lo, hi = bootstrap_ci(vals, n_boot, confidence, seed)
            entry[m] = {"mean": float(np.mean(vals)), "ci_low": lo, "ci_high": hi, "values": vals}
        out[algo] = entry
    return out


def write_csv(path, rows, fields=CSV_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig, out_dir=None, log_every: int = 1000, data_root=None) -> dict:
    """Train and evaluate every (algo, seed); write CSV, aggregate and manifest."""
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(data_root) if data_root is not None else out / "data"
    chash = cfg.hash()
    write_kv_file(cfg.to_dict(), out / "config.cfg")
    rows, files = [], []
    for algo in cfg.algos:
        for seed in cfg.seeds:
            log.info("run %s seed %d", algo, seed)
            try:
                row = run_single(cfg, algo, seed, out, data_root, log_every)
            except OsilError as exc:
                log.warning("%s seed %d failed: %s", algo, seed, exc)
                row = {"algo": algo, "seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            for f in row.pop("_files", []):
                files.append({"path": f, "config_hash": chash, "seed": seed, "algo": algo})
            data_dir = row.pop("_data_dir", None)
            if data_dir:
                for name in ("union.jsonl", "nonpref.jsonl"):
                    p = Path(data_dir) / name
                    files.append({"path": str(p), "config_hash": chash, "data_hash": cfg.data_hash(seed),
                                  "seed": seed, "sha256": file_sha256(p)})
            rows.append(row)
    write_csv(out / "per_seed.csv", rows)
    agg = aggregate(rows, cfg.n_boot, cfg.confidence)
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2))
    unique = {(f["path"], f["seed"]): f for f in files}
    manifest = {
        "config_hash": chash,
        "config": cfg.to_dict(),
        "files": list(unique.values()) + [
            {"path": name, "config_hash": chash, "seed": None}
            for name in ("config.cfg", "per_seed.csv", "aggregate.json")
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return {"out_dir": str(out), "rows": rows, "aggregate": agg, "config_hash": chash}


def run_ablation_matrix(base: ExperimentConfig, axis: str, values=None, out_dir=None, log_every: int = 1000) -> dict:
    """One experiment per value of the named axis; long-format CSV of every metric."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key, default_values = ABLATION_AXES[axis]
    values = default_values if values is None else values
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(base) / f"sweep-{axis}"
    out.mkdir(parents=True, exist_ok=True)
    long_rows, points = [], []
    for v in values:
        cfg = base.replace(**{key: v})
        res = run_experiment(cfg, out / f"{axis}={v}", log_every, data_root=out / "data")
        points.append({"value": v, "aggregate": res["aggregate"], "config_hash": res["config_hash"]})
        for r in res["rows"]:
            if r["status"] != "ok":
                continue
            for m in METRICS:
                long_rows.append({"axis": axis, "value": v, "algo": r["algo"], "seed": r["seed"],
                                  "metric": m, "score": r[m]})
    write_csv(out / "sweep.csv", long_rows, ("axis", "value", "algo", "seed", "metric", "score"))
    (out / "sweep.json").write_text(json.dumps({"axis": axis, "key": key, "points": points}, indent=2, default=str))
    return {"axis": axis, "key": key, "points": points, "rows": long_rows, "out_dir": str(out)}


def ordering_check(agg: dict, metric_cost="exact_cost", metric_return="exact_return") -> dict:
    """OSIL < PPL < BC on cost, OSIL cost at most half of BC, OSIL return at least 80% of BC."""
    c = {a: agg[a][metric_cost]["mean"] for a in ("osil", "ppl", "bc")}
    r_osil, r_bc = agg["osil"][metric_return]["mean"], agg["bc"][metric_return]["mean"]
    return {
        "osil_lt_ppl": c["osil"] < c["ppl"],
        "ppl_lt_bc": c["ppl"] < c["bc"],
        "osil_half_bc": c["osil"] <= 0.5 * c["bc"],
        "osil_return_80": r_osil >= 0.8 * r_bc,
    }


def cost_recovery_run(cfg: ExperimentConfig, seed: int, steps: int, held_out_seed: int | None = None):
    """Train the cost model alone, then score a held-out selection drawn from a fresh pool.

    The held-out trajectories go through the same return/cost selection as
    the training data (union plus non-preferred), with a different seed.
    """
    world = make_world(cfg.env)
    cmdp = world.compile()
    dc = cfg.data

    def select(s):
        pool = generate_pool(world, dc.pool_size, np.random.default_rng(s), dc.random_fraction)
        return build_datasets(pool, cmdp.action_space, dc.union_return_quantile, dc.nonpref_cost_quantile,
                              dc.n_nonpref, seed=s, union_cap=dc.union_cap)

    d_u, d_n = select(seed)
    model, history = train_cost_model(d_u.learner_view(), d_n.learner_view(), cfg.train, seed, steps)
    h_u, h_n = select(held_out_seed if held_out_seed is not None else 10_000 + seed)
    return cost_recovery(model, list(h_u.trajectories) + list(h_n.trajectories)), model, history


# ---------------------------------------------------------------------------
# plot data


PLOT_FIELDS = ("task", "algo", "seed", "metric", "step", "value")


def emit_plot_data(report_dir, out_path=None) -> dict:
    """Collect eval checkpoints and final metrics of every run below ``report_dir``.

    Writes ``plot_data.csv`` (long format) and ``plot_manifest.json`` listing
    runs with missing logs or evaluations.
    """
    root = Path(report_dir)
    out = Path(out_path) if out_path is not None else root
    out.mkdir(parents=True, exist_ok=True)
    rows, gaps, runs = [], [], 0
    for run_dir in sorted(root.rglob("runs/*/seed*")):
        if not run_dir.is_dir():
            continue
        runs += 1
        task_dir = run_dir.parent.parent.parent
        task = task_dir.name
        algo = run_dir.parent.name
        seed = int(run_dir.name[4:])
        log_path, eval_path = run_dir / "log.jsonl", run_dir / "eval.json"
        if not log_path.is_file():
            gaps.append({"run": str(run_dir.relative_to(root)), "missing": "log.jsonl"})
        else:
            for line in log_path.read_text().splitlines():
                entry = json.loads(line)
                for m, v in entry.get("eval", {}).items():
                    rows.append({"task": task, "algo": algo, "seed": seed, "metric": m, "step": entry["step"], "value": v})
        if not eval_path.is_file():
            gaps.append({"run": str(run_dir.relative_to(root)), "missing": "eval.json"})
        else:
            final = json.loads(eval_path.read_text())
            for m in METRICS:
                rows.append({"task": task, "algo": algo, "seed": seed, "metric": m, "step": "final", "value": final[m]})
    write_csv(out / "plot_data.csv", rows, PLOT_FIELDS)
    manifest = {"runs": runs, "rows": len(rows), "gaps": gaps}
    (out / "plot_manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_plot_data(path) -> list[dict]:
    rows = read_csv(path)
    for r in rows:
        r["seed"] = int(r["seed"])
        r["value"] = float(r["value"])
    return rows


def final_means(rows: list[dict]) -> dict:
    """``{(task, algo, metric): mean over seeds}`` of the final evaluations."""
    acc: dict = {}
    for r in rows:
        if r["step"] == "final":
            acc.setdefault((r["task"], r["algo"], r["metric"]), []).append(float(r["value"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


__all__ = [
    "ABLATION_AXES",
    "METRICS",
    "aggregate",
    "cost_recovery_run",
    "emit_plot_data",
    "evaluate",
    "final_means",
    "load_plot_data",
    "make_world",
    "ordering_check",
    "prepare_datasets",
    "run_ablation_matrix",
    "run_experiment",
    "train_algo",
]

