"""Rollout evaluation, normalised metrics, bootstrap intervals and the BC bound verifier."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .envkit import (
    TabularCmdp,
    as_tabular,
    exact_policy_evaluation,
    rollout_batch,
    solve_constrained_reference,
    uniform_policy,
)
from .errors import ConfigError, SupportError

BOUND_TOL = 1e-9


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RawEval:
    returns: np.ndarray
    costs: np.ndarray
    discounted_returns: np.ndarray
    discounted_costs: np.ndarray

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs))


def evaluate_policy(cmdp: TabularCmdp, policy, n_eval: int = 50, seed=0) -> RawEval:
    """``n_eval`` seeded rollouts; undiscounted episodic totals plus discounted ones."""
    if n_eval < 1:
        raise ConfigError("n_eval must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    states, actions = rollout_batch(cmdp, as_tabular(policy, cmdp), n_eval, rng)
    r = cmdp.reward[states[:, :-1], actions]
    c = cmdp.cost[states[:, :-1], actions]
    disc = cmdp.gamma ** np.arange(r.shape[1])
    return RawEval(r.sum(axis=1), c.sum(axis=1), r @ disc, c @ disc)


# ---------------------------------------------------------------------------
# metrics


def cvar20(costs) -> float:
    """Mean of the worst ``ceil(0.2 n)`` episodic costs."""
    c = np.sort(np.asarray(costs, dtype=float))[::-1]
    if c.size == 0:
        raise ConfigError("cvar20 needs at least one cost")
    k = math.ceil(0.2 * c.size - 1e-12)
    return float(np.mean(c[:k]))


@dataclass
class References:
    r_random: float
    r_ref: float
    c_ref: float
    c_max: float
    provenance: dict = field(default_factory=dict)

    def check(self) -> None:
        if self.r_ref == self.r_random:
            raise ConfigError("degenerate return references: R_ref == R_random")
        if self.c_max == self.c_ref:
            raise ConfigError("degenerate cost references: C_max == C_ref")


def compute_references(cmdp: TabularCmdp, n_random: int = 50, seed=0) -> References:
    """R_random from uniform rollouts, R_ref/C_ref from the constrained solver, C_max from the horizon."""
    rand = evaluate_policy(cmdp, uniform_policy(cmdp), n_random, seed)
    ref = solve_constrained_reference(cmdp)
    ev = exact_policy_evaluation(cmdp, ref.policy, mode="finite", gamma=1.0)
    refs = References(
        rand.mean_return,
        ev.j_reward,
        ev.j_cost,
        float(cmdp.horizon * cmdp.cost.max()),
        {
            "r_random": f"uniform policy, {n_random} rollouts",
            "r_ref": "constrained solver policy, exact undiscounted finite-horizon value",
            "c_max": "horizon x max per-step cost",
            "solver_lambda": ref.lam,
            "solver_feasible": ref.feasible,
        },
    )
    refs.check()
    return refs


def normalize_return(r, refs: References):
    return (np.asarray(r, dtype=float) - refs.r_random) / (refs.r_ref - refs.r_random)


def normalize_cost(c, refs: References):
    return (np.asarray(c, dtype=float) - refs.c_ref) / (refs.c_max - refs.c_ref)


@dataclass
class EvalReport:
    mean_return: float
    mean_cost: float
    cvar20_cost: float
    normalized_return: float
    normalized_cost: float
    normalized_cvar20_cost: float
    n_eval: int
    references: dict
    ci95: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_metrics(raw: RawEval, refs: References) -> EvalReport:
    refs.check()
    cv = cvar20(raw.costs)
    return EvalReport(
        raw.mean_return,
        raw.mean_cost,
        cv,
        float(normalize_return(raw.mean_return, refs)),
        float(normalize_cost(raw.mean_cost, refs)),
        float(normalize_cost(cv, refs)),
        int(raw.returns.size),
        asdict(refs),
    )


def bootstrap_ci(values, n_boot: int = 1000, confidence: float = 0.95, seed=0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean of per-seed ``values``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ConfigError("bootstrap needs at least one value")
    if v.size == 1:
        warnings.warn("single seed: bootstrap interval is degenerate", RuntimeWarning, stacklevel=2)
        return float(v[0]), float(v[0])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_boot, v.size))
    means = v[idx].mean(axis=1)
    lo = (1.0 - confidence) / 2.0
    low, high = np.quantile(means, [lo, 1.0 - lo])
    # percentile endpoints can miss the point estimate by rounding when all values agree
    m = float(v.mean())
    return float(min(low, m)), float(max(high, m))


# ---------------------------------------------------------------------------
# performance bound for behaviour cloning


def kl_rows(p, q) -> np.ndarray:
    """Per-row ``KL(p || q)``; raises ``SupportError`` if q misses mass of p."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    on = p > 0
    if np.any(on & (q <= 0)):
        raise SupportError("policy puts zero mass on an action the union policy uses")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(on, p * (np.log(np.where(on, p, 1.0)) - np.log(np.where(on, q, 1.0))), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def discounted_occupancy(cmdp: TabularCmdp, pi, gamma: float) -> np.ndarray:
    """Unnormalised ``rho0^T (I - gamma P_pi)^-1``."""
    P_pi = np.einsum("sa,sat->st", pi, cmdp.transition)
    return np.linalg.solve((np.eye(cmdp.n_states) - gamma * P_pi).T, cmdp.initial_dist)


@dataclass
class BoundCertificate:
    J_pi: float
    J_piU: float
    epsilon: float
    max_kl: float
    avg_kl: float
    rhs: float
    holds: bool
    lemma1_residual: float
    pinsker_holds: bool
    max_pinsker_slack: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_performance_bound(cmdp: TabularCmdp, pi_u, pi) -> BoundCertificate:
    """Exact check of ``J(pi) >= J(pi_U) - 2 eps / (1 - gamma) sqrt(max_s KL)``.

    All values are discounted infinite-horizon quantities of the reward
    channel.  Also reports the residual of the advantage decomposition
    ``J(pi_U) - J(pi) = E_{pi_U}[sum_t gamma^t A^pi]`` and per-state Pinsker.
    """
    g = cmdp.gamma
    if not g < 1.0:
        raise ConfigError("the bound needs gamma < 1")
    pi_u = as_tabular(pi_u, cmdp)
    pi = as_tabular(pi, cmdp)
    kl = kl_rows(pi_u, pi)
    ev_pi = exact_policy_evaluation(cmdp, pi, mode="discounted")
    ev_u = exact_policy_evaluation(cmdp, pi_u, mode="discounted")
    adv = ev_pi.q_reward - ev_pi.v_reward[:, None]
    eps = float(np.max(np.abs(adv)))
    d_u = discounted_occupancy(cmdp, pi_u, g)
    max_kl = float(kl.max())
    avg_kl = float((d_u @ kl) / d_u.sum())
    rhs = ev_u.j_reward - 2.0 * eps / (1.0 - g) * math.sqrt(max_kl)
    # J(pi_U) - J(pi) = sum_s d_U(s) sum_a pi_U(a|s) A^pi(s, a)
    lemma1 = abs((ev_u.j_reward - ev_pi.j_reward) - float(d_u @ np.sum(pi_u * adv, axis=1)))
    tv = 0.5 * np.abs(pi_u - pi).sum(axis=1)
    slack = tv**2 - kl
    return BoundCertificate(
        ev_pi.j_reward,
        ev_u.j_reward,
        eps,
        max_kl,
        avg_kl,
        rhs,
        bool(ev_pi.j_reward >= rhs - BOUND_TOL),
        lemma1,
        bool(np.all(slack <= 1e-12)),
        float(slack.max()),
    )


# ---------------------------------------------------------------------------
# learned-cost recovery


@dataclass
class CostRecovery:
    trajectory_id: np.ndarray
    predicted_total_cost: np.ndarray
    hidden_total_cost: np.ndarray

    @property
    def spearman(self) -> float:
        return spearman(self.predicted_total_cost, self.hidden_total_cost)

    def rows(self) -> list[dict]:
        return [
            {"trajectory_id": int(i), "predicted_total_cost": float(p), "hidden_total_cost": float(h)}
            for i, p, h in zip(self.trajectory_id, self.predicted_total_cost, self.hidden_total_cost)
        ]


def spearman(a, b) -> float:
    rho = stats.spearmanr(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic
    return float(rho)


def cost_recovery(cost_model, trajectories) -> CostRecovery:
    """Undiscounted predicted episode cost next to the hidden total for each trajectory."""
    pred = np.array([float(np.sum(cost_model.per_step(t.states[:-1], t.actions))) for t in trajectories])
    hidden = np.array([float(np.sum(t.hidden_costs)) for t in trajectories])
    return CostRecovery(np.arange(len(trajectories)), pred, hidden)
