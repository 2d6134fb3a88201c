"""Command-line entry point: ``osil <subcommand> ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 a
requested check did not pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ALGOS, ExperimentConfig, _parse_value, desk_config, load_config
from .costmodel import CostModel
from .datakit import (
    build_datasets,
    deserialize_dataset,
    generate_pool,
    inject_label_noise,
    serialize_dataset,
)
from .diffkit import load_checkpoint, save_checkpoint
from .envkit import load_env_config, random_cmdp
from .errors import ConfigError, OsilError
from .evalkit import check_performance_bound, compute_references, cost_recovery
from .experiment import (
    ABLATION_AXES,
    CSV_FIELDS,
    emit_plot_data,
    evaluate,
    make_world,
    ordering_check,
    output_root,
    run_ablation_matrix,
    run_experiment,
    train_algo,
    write_csv,
    write_jsonl,
)
from .policy import StochasticPolicy

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("osil")


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(path) -> Path:
    p = Path(path) if path else output_root()
    p.mkdir(parents=True, exist_ok=True)
    return p


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _dataset_pair(data_dir):
    d = Path(data_dir)
    return deserialize_dataset(d / "union.jsonl"), deserialize_dataset(d / "nonpref.jsonl")


def _load_policy(path, cmdp) -> StochasticPolicy:
    nets, _ = load_checkpoint(path)
    if "policy" not in nets:
        raise ConfigError(f"{path} holds no policy network")
    return StochasticPolicy(cmdp.obs_dim, cmdp.action_space, net=nets["policy"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    world = load_env_config(args.env_config) if args.env_config else make_world({})
    cmdp = world.compile()
    pool = generate_pool(world, args.pool_size, np.random.default_rng(args.seed), args.random_fraction)
    d_u, d_n = build_datasets(pool, cmdp.action_space, args.union_quantile, args.nonpref_quantile, args.n_nonpref,
                              seed=args.seed, union_cap=args.union_cap)
    if args.noise:
        d_n = inject_label_noise(d_n, d_u, args.noise, args.seed)
    out = _out_dir(args.out_dir)
    stats = {
        "union": d_u.stats(),
        "nonpref": d_n.stats(),
        "sha256": {
            "union": serialize_dataset(d_u, out / "union.jsonl"),
            "nonpref": serialize_dataset(d_n, out / "nonpref.jsonl"),
        },
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    _print_json(stats)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    updates = {"train.algo": args.algo}
    if args.steps is not None:
        updates["train.steps"] = args.steps
    if args.eval_every is not None:
        updates["train.eval_every"] = args.eval_every
    cfg = cfg.replace(**updates)
    d_u, d_n = _dataset_pair(args.data_dir)
    evaluator = None
    if cfg.train.eval_every:
        from .experiment import make_evaluator

        cmdp = make_world(cfg.env).compile()
        evaluator = make_evaluator(cmdp, compute_references(cmdp, seed=args.seed), cfg.train.n_eval, args.seed)
    res = train_algo(args.algo, d_u.learner_view(), d_n.learner_view(), cfg.train, args.seed, evaluator,
                     args.log_every)
    out = _out_dir(args.out_dir)
    write_jsonl(out / "log.jsonl", res.log)
    meta = {"algo": args.algo, "seed": args.seed, "config_hash": cfg.hash()}
    save_checkpoint(out / "policy.json", {"policy": res.policy.net}, meta)
    if res.cost_model is not None:
        save_checkpoint(out / "cost_model.json", {"encoder": res.cost_model.encoder, "head": res.cost_model.head},
                        meta)
    for line in res.log[-1:]:
        print(json.dumps(line))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    cmdp = make_world(cfg.env).compile()
    policy = _load_policy(args.checkpoint, cmdp)
    report = evaluate(cmdp, policy, compute_references(cmdp, seed=args.seed), args.n_eval, args.seed)
    _print_json(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if args.csv:
        row = {"algo": args.algo, "seed": args.seed, "status": "ok", **report, "train_seconds": "", "error": ""}
        path = Path(args.csv)
        if path.is_file():
            with open(path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=list(CSV_FIELDS), extrasaction="ignore").writerow(row)
        else:
            write_csv(path, [row])
    return EXIT_OK


def cmd_eval_cost(args) -> int:
    nets, _ = load_checkpoint(args.checkpoint)
    if not {"encoder", "head"} <= set(nets):
        raise ConfigError(f"{args.checkpoint} holds no cost model")
    trajs = []
    space = None
    for path in args.data:
        ds = deserialize_dataset(path)
        space = ds.action_space
        trajs.extend(ds.trajectories)
    model = CostModel.from_nets(nets["encoder"], nets["head"], space)
    rec = cost_recovery(model, trajs)
    write_csv(args.out, rec.rows(), ("trajectory_id", "predicted_total_cost", "hidden_total_cost"))
    print(json.dumps({"n_trajectories": len(trajs), "spearman": rec.spearman}))
    if args.min_spearman is not None and not rec.spearman >= args.min_spearman:
        raise CheckFailed(f"spearman {rec.spearman:.3f} < {args.min_spearman}")
    return EXIT_OK


def cmd_check_bound(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    worst = 0.0
    certs = []
    for _ in range(args.n_instances):
        cmdp = random_cmdp(rng, n_states=args.states, n_actions=args.actions, gamma=args.gamma)
        pi_u = rng.dirichlet(np.ones(args.actions), size=args.states)
        pi = rng.dirichlet(np.ones(args.actions), size=args.states)
        cert = check_performance_bound(cmdp, pi_u, pi)
        ok = cert.holds and cert.pinsker_holds and cert.lemma1_residual <= 1e-8
        failures += not ok
        worst = max(worst, cert.lemma1_residual)
        certs.append(cert.to_dict())
    summary = {"instances": args.n_instances, "failures": failures, "max_lemma1_residual": worst}
    if args.out:
        Path(args.out).write_text(json.dumps({"summary": summary, "certificates": certs}, indent=2))
    _print_json(certs[0] if args.n_instances == 1 else summary)
    if failures:
        raise CheckFailed(f"{failures} of {args.n_instances} instances violated a bound check")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    updates = {}
    if args.algos:
        updates["algos"] = args.algos
    if args.seeds:
        updates["seeds"] = args.seeds
    if args.steps is not None:
        updates["train.steps"] = args.steps
    cfg = cfg.replace(**updates) if updates else cfg
    res = run_experiment(cfg, args.out_dir, args.log_every)
    summary = {a: {m: v["mean"] for m, v in e.items() if isinstance(v, dict)} for a, e in res["aggregate"].items()}
    _print_json({"out_dir": res["out_dir"], "config_hash": res["config_hash"], "means": summary})
    if args.check_ordering:
        checks = ordering_check(res["aggregate"])
        _print_json(checks)
        if not all(checks.values()):
            raise CheckFailed("ordering check failed")
    if any(r["status"] != "ok" for r in res["rows"]):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(**{"train.steps": args.steps})
    values = [_parse_value(v) for v in args.values.split(",")] if args.values else None
    res = run_ablation_matrix(cfg, args.axis, values, args.out_dir, args.log_every)
    table = []
    for p in res["points"]:
        for algo, entry in p["aggregate"].items():
            if "mean_cost" in entry:
                table.append({"value": p["value"], "algo": algo, "mean_cost": entry["mean_cost"]["mean"],
                              "mean_return": entry["mean_return"]["mean"]})
    _print_json({"out_dir": res["out_dir"], "points": table})
    return EXIT_OK


def cmd_emit_plot_data(args) -> int:
    manifest = emit_plot_data(args.report_dir, args.out)
    _print_json(manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osil", description="Offline safe imitation learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="key-value experiment config (defaults to the desk-scale config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")

    g = sub.add_parser("gen-data", help="generate the trajectory pool and select D_U / D_N")
    g.add_argument("--env-config")
    g.add_argument("--pool-size", type=int, default=1000)
    g.add_argument("--random-fraction", type=float, default=0.5)
    g.add_argument("--union-quantile", type=float, default=0.5)
    g.add_argument("--nonpref-quantile", type=float, default=0.7)
    g.add_argument("--n-nonpref", type=int, default=50)
    g.add_argument("--union-cap", type=int)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one algorithm on a dataset directory")
    t.add_argument("--algo", choices=ALGOS, default="osil")
    add_config(t)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--log-every", type=int, default=1000)
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a policy checkpoint")
    add_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--algo", default="osil")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-eval", type=int, default=50)
    e.add_argument("--out", help="write the report JSON here")
    e.add_argument("--csv", help="append a flat row to this CSV")
    e.set_defaults(func=cmd_eval)

    ec = sub.add_parser("eval-cost", help="compare learned and hidden trajectory costs")
    ec.add_argument("--checkpoint", required=True)
    ec.add_argument("--data", nargs="+", required=True, help="dataset files (JSON lines)")
    ec.add_argument("--out", required=True, help="CSV path")
    ec.add_argument("--min-spearman", type=float)
    ec.set_defaults(func=cmd_eval_cost)

    b = sub.add_parser("check-bound", help="verify the BC performance bound on random tabular instances")
    b.add_argument("--n-instances", type=int, default=1)
    b.add_argument("--states", type=int, default=6)
    b.add_argument("--actions", type=int, default=3)
    b.add_argument("--gamma", type=float, default=0.9)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_check_bound)

    r = sub.add_parser("run", help="generate data, train and evaluate every (algo, seed)")
    add_config(r)
    r.add_argument("--algos", nargs="+", choices=ALGOS)
    r.add_argument("--seeds", nargs="+", type=int)
    r.add_argument("--steps", type=int)
    r.add_argument("--log-every", type=int, default=1000)
    r.add_argument("--out-dir")
    r.add_argument("--check-ordering", action="store_true", help="exit 3 unless OSIL < PPL < BC on cost")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one ablation axis")
    add_config(s)
    s.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    s.add_argument("--values", help="comma-separated override of the axis values")
    s.add_argument("--steps", type=int)
    s.add_argument("--log-every", type=int, default=1000)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sweep)

    pd = sub.add_parser("emit-plot-data", help="collect run logs into a long-format CSV")
    pd.add_argument("report_dir")
    pd.add_argument("--out")
    pd.set_defaults(func=cmd_emit_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (OsilError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
