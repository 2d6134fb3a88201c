"""End-to-end acceptance suite; prints one PASS/FAIL line per criterion.

Run directly with ``python tests/test_acceptance.py`` or through pytest.
Criteria 4-6 train real models and take a long time (see README).
Set ``OSIL_OUTPUT_ROOT`` to keep the run artifacts.
"""

import dataclasses
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from osil.config import desk_config
from osil.costcritic import CostCritic, critic_step
from osil.costmodel import preference_loss
from osil.datakit import deserialize_dataset, file_sha256, sample_partial_batch, serialize_dataset
from osil.diffkit import Adam, Mlp, make_rng, polyak_update
from osil.envkit import random_cmdp
from osil.evalkit import check_performance_bound, cvar20
from osil.experiment import (
    OUTPUT_ROOT_ENV,
    cost_recovery_run,
    ordering_check,
    prepare_datasets,
    run_ablation_matrix,
    run_experiment,
)
from osil.policy import adaptive_alpha, train_bc, train_osil

HERE = Path(__file__).resolve().parent
SEEDS = [0, 1, 2, 3, 4]
COST_RECOVERY_STEPS = 50_000
SWEEP_STEPS = 20_000


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        p = Path(root) / "acceptance"
        p.mkdir(parents=True, exist_ok=True)
        return p
    return tmp_path_factory.mktemp("acceptance")


def fmt_ci(entry):
    return f"{entry['mean']:.3f} [{entry['ci_low']:.3f}, {entry['ci_high']:.3f}]"


# 1 -------------------------------------------------------------------------


def test_criterion_1_gradient_suite(acceptance_report):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(HERE / "test_gradients.py")],
        capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 120
    assert acceptance_report(1, ok, f"finite-difference suite: {summary}; {elapsed:.1f}s (limit 120s)")


# 2 -------------------------------------------------------------------------


def bound_instance(rng):
    cmdp = random_cmdp(rng, n_states=int(rng.integers(2, 9)), n_actions=int(rng.integers(2, 5)),
                       gamma=float(rng.uniform(0.5, 0.99)))
    S, A = cmdp.n_states, cmdp.n_actions
    pi_u = rng.dirichlet(np.full(A, rng.uniform(0.2, 3.0)), size=S)
    pi = np.maximum(rng.dirichlet(np.full(A, rng.uniform(0.2, 3.0)), size=S), 1e-8)
    return cmdp, pi_u, pi / pi.sum(axis=1, keepdims=True)


def test_criterion_2_bound_verifier(acceptance_report):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    holds = pinsker = 0
    worst_residual = 0.0
    for _ in range(1000):
        cert = check_performance_bound(*bound_instance(rng))
        holds += cert.holds
        pinsker += cert.pinsker_holds
        worst_residual = max(worst_residual, cert.lemma1_residual)
    elapsed = time.perf_counter() - t0
    ok = holds == 1000 and pinsker == 1000 and worst_residual <= 1e-8 and elapsed < 300
    assert acceptance_report(
        2, ok,
        f"bound holds {holds}/1000, Pinsker {pinsker}/1000, max identity residual {worst_residual:.2e}; "
        f"{elapsed:.1f}s (limit 300s)",
    )


# 3 -------------------------------------------------------------------------


def test_criterion_3_closed_forms(acceptance_report):
    checks = {}
    loss, _, _ = preference_loss([1.7], [1.7])
    checks["bradley_terry_ln2"] = abs(loss - math.log(2.0)) <= 1e-12

    q = np.random.default_rng(0).normal(size=32)
    errs = [abs(adaptive_alpha(q + d, q, a) - a * math.exp(-d)) for d in (-2.0, -0.3, 0.0, 0.7, 3.0) for a in (0.005, 1.0)]
    checks["adaptive_alpha"] = max(errs) <= 1e-12

    rng = np.random.default_rng(1)
    online = Mlp([3, 5, 2], rng=rng)
    target = Mlp([3, 5, 2], rng=rng)
    polyak_update(target.params, online.params, 1.0)
    checks["polyak_zeta_one"] = np.array_equal(target.params.values, online.params.values)

    cv_ok = True
    for n in (1, 3, 5, 7, 50, 101):
        costs = rng.uniform(0, 30, n)
        k = math.ceil(0.2 * n)
        cv_ok &= cvar20(costs) == float(np.mean(sorted(costs, reverse=True)[:k]))
    checks["cvar20_sort_oracle"] = bool(cv_ok)

    ok = all(checks.values())
    assert acceptance_report(3, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))


# 4 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_cost_recovery(acceptance_report, artifacts):
    cfg = desk_config()
    t0 = time.perf_counter()
    rhos = {}
    for seed in SEEDS:
        rec, _, _ = cost_recovery_run(cfg, seed, COST_RECOVERY_STEPS)
        rhos[seed] = rec.spearman
    elapsed = time.perf_counter() - t0
    (artifacts / "cost_recovery.json").write_text(json.dumps({"steps": COST_RECOVERY_STEPS, "spearman": rhos}))
    n_good = sum(r >= 0.8 for r in rhos.values())
    ok = n_good >= 4 and elapsed < 900
    detail = ", ".join(f"s{k}={v:.3f}" for k, v in rhos.items())
    assert acceptance_report(4, ok, f"Spearman {detail}; {n_good}/5 >= 0.8 (need 4); {elapsed:.0f}s (limit 900s)")


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_safety_ordering(acceptance_report, artifacts):
    cfg = desk_config(algos=["bc", "ppl", "osil"], seeds=SEEDS)
    assert cfg.train.steps == 50_000
    t0 = time.perf_counter()
    res = run_experiment(cfg, artifacts / "ordering", log_every=5000)
    elapsed = time.perf_counter() - t0
    agg = res["aggregate"]
    checks = ordering_check(agg)
    complete = all(agg[a]["n_seeds"] == len(SEEDS) for a in ("bc", "ppl", "osil"))
    ok = all(checks.values()) and complete and elapsed < 7200
    costs = "; ".join(f"{a} cost {fmt_ci(agg[a]['exact_cost'])}" for a in ("osil", "ppl", "bc"))
    rets = "; ".join(f"{a} return {fmt_ci(agg[a]['exact_return'])}" for a in ("osil", "bc"))
    flags = ", ".join(f"{k}={v}" for k, v in checks.items())
    assert acceptance_report(5, ok, f"{costs}; {rets}; {flags}; {elapsed / 60:.1f} min (limit 120)")


# 6 -------------------------------------------------------------------------


def noise_nondecreasing(points) -> bool:
    """Each step up in noise may lower mean cost only if the two intervals overlap."""
    for prev, nxt in zip(points, points[1:]):
        if nxt["mean"] < prev["mean"] and nxt["ci_high"] < prev["ci_low"]:
            return False
    return points[-1]["mean"] >= points[0]["mean"] or points[-1]["ci_high"] >= points[0]["ci_low"]


@pytest.mark.slow
def test_criterion_6_ablation_trends(acceptance_report, artifacts):
    base = desk_config(algos=["osil"], seeds=SEEDS).replace(**{"train.steps": SWEEP_STEPS})
    nonpref = run_ablation_matrix(base, "n_nonpref", [5, 10, 20, 50], artifacts / "sweep_n_nonpref", log_every=5000)
    noise = run_ablation_matrix(base, "noise", [0.0, 0.1, 0.2, 0.5], artifacts / "sweep_noise", log_every=5000)
    by_n = {p["value"]: p["aggregate"]["osil"]["exact_cost"] for p in nonpref["points"]}
    by_noise = [p["aggregate"]["osil"]["exact_cost"] for p in noise["points"]]
    n_ok = by_n[50]["mean"] <= by_n[5]["mean"]
    noise_ok = noise_nondecreasing(by_noise)
    detail = (
        "|D_N| " + ", ".join(f"{k}: {fmt_ci(v)}" for k, v in by_n.items())
        + f" (50 <= 5: {n_ok}); noise "
        + ", ".join(f"{p['value']}: {fmt_ci(e)}" for p, e in zip(noise["points"], by_noise))
        + f" (nondecreasing within CI overlap: {noise_ok}); {SWEEP_STEPS} steps per run"
    )
    assert acceptance_report(6, n_ok and noise_ok, detail)


# 7 -------------------------------------------------------------------------


def test_criterion_7_degeneracies(acceptance_report, tmp_path):
    cfg = desk_config()
    d_u, d_n, _, _ = prepare_datasets(cfg, 0, tmp_path)
    lu, ln = d_u.learner_view(), d_n.learner_view()
    checks = {}

    train = dataclasses.replace(cfg.train, steps=1000, alpha_bar=0.0)
    for seed in (0, 1):
        a = train_osil(lu, ln, train, seed=seed, log_every=0)
        b = train_bc(lu, train, seed=seed, log_every=0)
        checks[f"alpha0_bitwise_seed{seed}"] = np.array_equal(a.policy.net.params.values, b.policy.net.params.values)

    critic = CostCritic(lu.obs_dim, lu.action_space, [16], cfg.train.gamma, 1.0, rng=make_rng(0, "critic_init"))
    opt = Adam([critic.q_net], 1e-2)
    trans = lu.transitions()
    rng = np.random.default_rng(0)
    policy = train_bc(lu, dataclasses.replace(train, steps=10), seed=0).policy
    tracks = True
    for _ in range(20):
        critic_step(critic, opt, lambda s, a: np.ones(len(s)), trans.sample(32, rng), policy, rng)
        tracks &= np.array_equal(critic.q_target.params.values, critic.q_net.params.values)
    checks["zeta1_target_tracks"] = bool(tracks)

    T = lu.trajectories[0].length
    starts_zero = all(np.all(sample_partial_batch(lu, ln, 8, 8, T, rng).starts == 0) for _ in range(50))
    checks["full_length_start_zero"] = bool(starts_zero)

    ok = all(checks.values())
    assert acceptance_report(7, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))


# 8 -------------------------------------------------------------------------


def _same_dataset(a, b) -> bool:
    if a.label != b.label or len(a) != len(b):
        return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        for name in ("states", "actions", "hidden_rewards", "hidden_costs", "terminals"):
            va, vb = getattr(ta, name), getattr(tb, name)
            if va.dtype != vb.dtype or not np.array_equal(va, vb):
                return False
    return True


def test_criterion_8_determinism_and_format(acceptance_report, tmp_path):
    cfg = desk_config(algos=["osil", "ppl"], seeds=[3]).replace(**{"train.steps": 300})
    runs = [run_experiment(cfg, tmp_path / f"run{i}", log_every=50) for i in range(2)]
    checks = {}
    same_logs = True
    for algo in cfg.algos:
        logs = [(Path(r["out_dir"]) / "runs" / algo / "seed3" / "log.jsonl").read_bytes() for r in runs]
        same_logs &= logs[0] == logs[1] and len(logs[0]) > 0
    checks["identical_logs"] = bool(same_logs)

    def data_hashes(r):
        m = json.loads((Path(r["out_dir"]) / "manifest.json").read_text())
        return sorted((Path(f["path"]).name, f["sha256"]) for f in m["files"] if "sha256" in f)

    h0, h1 = data_hashes(runs[0]), data_hashes(runs[1])
    checks["identical_dataset_hashes"] = h0 == h1 and len(h0) == 2

    d_u, d_n, _, _ = prepare_datasets(cfg, 3, tmp_path / "data")
    lossless = True
    for ds in (d_u, d_n):
        p1, p2 = tmp_path / f"{ds.label}.a.jsonl", tmp_path / f"{ds.label}.b.jsonl"
        h = serialize_dataset(ds, p1)
        back = deserialize_dataset(p1)
        lossless &= _same_dataset(ds, back) and serialize_dataset(back, p2) == h == file_sha256(p2)
    checks["round_trip_lossless"] = bool(lossless)

    ok = all(checks.values())
    assert acceptance_report(8, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
