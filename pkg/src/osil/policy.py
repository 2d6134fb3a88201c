"""Stochastic policies, the BC + cost-critic objective and the OSIL training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .costcritic import CostCritic, GroundTruthCost, critic_step
from .costmodel import CostModel, joint_cost_step
from .datakit import as_learner_dataset, sample_partial_batch
from .diffkit import Adam, Mlp, make_rng
from .envkit import ActionSpace
from .errors import DataError, NumericError, OsilError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ALPHA_CLIP = 10.0
_ATANH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class StochasticPolicy:
    """Categorical logits (discrete) or tanh-squashed Gaussian (continuous)."""

    def __init__(self, obs_dim: int, action_space: ActionSpace, hidden=(256, 256), activation: str = "tanh",
                 rng: np.random.Generator | None = None, net: Mlp | None = None):
        self.obs_dim = obs_dim
        self.action_space = action_space
        out = action_space.n if action_space.discrete else 2 * action_space.dim
        self.net = net if net is not None else Mlp([obs_dim, *hidden, out], activation, rng=rng)

    @property
    def discrete(self) -> bool:
        return self.action_space.discrete

    # -- distribution ------------------------------------------------------
    def _gaussian(self, out):
        d = self.action_space.dim
        mu, raw = out[:, :d], out[:, d:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def action_probabilities(self, obs) -> np.ndarray:
        if not self.discrete:
            raise DataError("action probabilities only exist for discrete actions")
        logits = self.net(np.atleast_2d(np.asarray(obs, dtype=float)))
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def log_prob(self, obs, actions) -> np.ndarray:
        return -self.nll(obs, actions)

    def nll(self, obs, actions, return_cache: bool = False):
        """Per-sample negative log-likelihood; with the cache needed by ``nll_backward``."""
        out, cache = self.net.forward(np.atleast_2d(np.asarray(obs, dtype=float)), return_cache=True)
        n = out.shape[0]
        if self.discrete:
            a = np.asarray(actions)
            if a.shape != (n,) or not np.issubdtype(a.dtype, np.integer) or np.any((a < 0) | (a >= self.action_space.n)):
                raise DataError("dataset actions must be integer indices inside the action space")
            m = out.max(axis=1, keepdims=True)
            lse = (m + np.log(np.exp(out - m).sum(axis=1, keepdims=True)))[:, 0]
            nll = lse - out[np.arange(n), a]
            aux = (a, np.exp(out - lse[:, None]))
        else:
            a = np.asarray(actions, dtype=float).reshape(n, self.action_space.dim)
            if np.any(np.abs(a) > 1.0 + _ATANH_EPS):
                raise DataError("continuous dataset actions must lie in [-1, 1]")
            a = np.clip(a, -1.0 + _ATANH_EPS, 1.0 - _ATANH_EPS)
            u = np.arctanh(a)
            mu, log_std = self._gaussian(out)
            zsc = (u - mu) / np.exp(log_std)
            per_dim = 0.5 * zsc**2 + log_std + _HALF_LOG_2PI + np.log(1.0 - a * a)
            nll = per_dim.sum(axis=1)
            aux = (zsc, log_std, out)
        return (nll, (cache, aux)) if return_cache else nll

    def nll_backward(self, state, weights) -> np.ndarray:
        """Parameter gradient of ``sum(weights * nll)``."""
        cache, aux = state
        w = np.asarray(weights, dtype=float)[:, None]
        if self.discrete:
            a, p = aux
            g = p.copy()
            g[np.arange(len(a)), a] -= 1.0
            g *= w
        else:
            zsc, log_std, out = aux
            d = self.action_space.dim
            sigma = np.exp(log_std)
            g_mu = -zsc / sigma
            inside = (out[:, d:] > LOG_STD_MIN) & (out[:, d:] < LOG_STD_MAX)
            g_ls = (1.0 - zsc**2) * inside
            g = np.concatenate([g_mu, g_ls], axis=1) * w
        grad, _ = self.net.backward(cache, g)
        return grad

    def sample(self, obs, rng: np.random.Generator) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.discrete:
            cdf = np.cumsum(self.action_probabilities(obs), axis=1)
            return np.minimum((rng.random(len(obs))[:, None] >= cdf).sum(axis=1), self.action_space.n - 1)
        mu, log_std = self._gaussian(self.net(obs))
        return np.tanh(mu + np.exp(log_std) * rng.standard_normal(mu.shape))

    def mean_action(self, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.discrete:
            return self.action_probabilities(obs).argmax(axis=1)
        return np.tanh(self._gaussian(self.net(obs))[0])

    def copy(self) -> "StochasticPolicy":
        return StochasticPolicy(self.obs_dim, self.action_space, net=self.net.copy())


def bc_loss(policy: StochasticPolicy, obs, actions, weights=None) -> tuple[float, np.ndarray]:
    """Weighted mean negative log-likelihood and its parameter gradient."""
    nll, state = policy.nll(obs, actions, return_cache=True)
    w = np.ones_like(nll) if weights is None else np.asarray(weights, dtype=float)
    n = nll.size
    loss = float(np.sum(w * nll) / n)
    return loss, policy.nll_backward(state, w / n)


def adaptive_alpha(q_data, q_pi, alpha_bar: float) -> float:
    """``alpha_bar / mean(exp(clip(Q(s0,a0) - Q(s0,pi))))``; larger when the policy is costlier."""
    diff = np.clip(np.asarray(q_data, dtype=float) - np.asarray(q_pi, dtype=float), -ALPHA_CLIP, ALPHA_CLIP)
    return float(alpha_bar / np.mean(np.exp(diff)))


def critic_term(policy: StochasticPolicy, critic: CostCritic, obs, rng: np.random.Generator | None = None):
    """Mean ``Q(s0, pi(s0))`` and the parameter gradient of the penalty term.

    Discrete actions use the exact expectation with a per-state action-mean
    baseline (which leaves the gradient unchanged but makes a constant critic
    contribute exactly zero).  Continuous actions use one reparameterised
    sample.  Returns ``(value, grad, q_pi_per_state)``.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    n = obs.shape[0]
    out, cache = policy.net.forward(obs, return_cache=True)
    if policy.discrete:
        q = critic.q_all(obs)
        shifted = out - out.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        q_pi = np.sum(p * q, axis=1)
        qc = q - q.mean(axis=1, keepdims=True)
        v = np.sum(p * qc, axis=1, keepdims=True)
        g_out = p * (qc - v) / n
    else:
        mu, log_std = policy._gaussian(out)
        eps = rng.standard_normal(mu.shape)
        sigma = np.exp(log_std)
        a = np.tanh(mu + sigma * eps)
        q_pi, dq_da = critic.action_gradient(obs, a)
        du = dq_da * (1.0 - a * a) / n
        d = policy.action_space.dim
        inside = (out[:, d:] > LOG_STD_MIN) & (out[:, d:] < LOG_STD_MAX)
        g_out = np.concatenate([du, du * sigma * eps * inside], axis=1)
    grad, _ = policy.net.backward(cache, g_out)
    return float(np.mean(q_pi)), grad, q_pi


def policy_objective_grads(policy, critic, bc_obs, bc_actions, s0_obs, s0_actions, alpha_bar, rng=None,
                           bc_weights=None):
    """Gradient of ``bc_loss + alpha * mean Q(s0, pi(s0))`` with alpha held fixed."""
    bc, g_bc = bc_loss(policy, bc_obs, bc_actions, bc_weights)
    value, g_q, q_pi = critic_term(policy, critic, s0_obs, rng)
    q_data = critic.q(s0_obs, s0_actions)
    alpha = adaptive_alpha(q_data, q_pi, alpha_bar)
    grad = g_bc + alpha * g_q
    total = bc + alpha * value
    if not (np.isfinite(total) and np.all(np.isfinite(grad))):
        raise NumericError("non-finite policy loss",
                           details={"bc": bc, "critic_term": value, "alpha": alpha})
    return grad, bc, value, alpha


def policy_step(policy, optimizer: Adam, critic, bc_obs, bc_actions, s0_obs, s0_actions, alpha_bar, rng=None):
    grad, bc, value, alpha = policy_objective_grads(policy, critic, bc_obs, bc_actions, s0_obs, s0_actions,
                                                    alpha_bar, rng)
    optimizer.step([grad])
    return bc, value, alpha


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    policy: StochasticPolicy
    log: list = field(default_factory=list)
    cost_model: CostModel | None = None
    critic: CostCritic | None = None
    extras: dict = field(default_factory=dict)


class TrainingError(OsilError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training failed at iteration {step}: {cause}")
        self.step = step
        self.cause = cause


def make_policy(obs_dim, action_space, cfg, seed) -> tuple[StochasticPolicy, Adam]:
    policy = StochasticPolicy(obs_dim, action_space, cfg.actor_hidden, cfg.activation, make_rng(seed, "policy_init"))
    opt = Adam([policy.net], cfg.lr_actor, cfg.weight_decay, cfg.max_grad_norm)
    return policy, opt


def _log_entry(step, **values):
    return {"step": int(step), **{k: float(v) for k, v in values.items()}}


def _should_log(step, steps, every):
    return (every and step % every == 0) or step == steps


def train_osil(d_u, d_n, cfg, seed: int = 0, evaluator: Callable | None = None, log_every: int = 1000,
               ground_truth: GroundTruthCost | None = None) -> TrainResult:
    """Interleaved cost-model, critic and policy updates.

    ``cfg`` is a ``TrainConfig``.  ``evaluator(policy)`` returns a dict of
    metrics and is called every ``cfg.eval_every`` iterations.
    ``ground_truth`` replaces the learned cost (ablation).
    """
    d_u, d_n = as_learner_dataset(d_u), as_learner_dataset(d_n)
    obs_dim, space = d_u.obs_dim, d_u.action_space
    policy, p_opt = make_policy(obs_dim, space, cfg, seed)
    cost_model = None
    if ground_truth is None:
        cost_model = CostModel(obs_dim, space, cfg.cost_hidden, cfg.embed_dim, cfg.eta, cfg.activation,
                               make_rng(seed, "cost_init"))
        c_opt = Adam(cost_model.nets, cfg.lr_cost, cfg.weight_decay, cfg.max_grad_norm)
        cost_fn = cost_model.per_step
    else:
        cost_fn = ground_truth
    critic = CostCritic(obs_dim, space, cfg.critic_hidden, cfg.gamma, cfg.zeta, cfg.activation,
                        make_rng(seed, "critic_init"))
    q_opt = Adam([critic.q_net], cfg.lr_critic, cfg.weight_decay, cfg.max_grad_norm)

    transitions = d_u.transitions()
    s0_all, a0_all = d_u.initial_pairs()
    rng_seg = make_rng(seed, "cost_batch")
    rng_pair = make_rng(seed, "cost_pairs")
    rng_cb = make_rng(seed, "critic_batch")
    rng_ct = make_rng(seed, "critic_target")
    rng_pb = make_rng(seed, "policy_batch")
    rng_s0 = make_rng(seed, "policy_s0")
    rng_pa = make_rng(seed, "policy_action")

    log = []
    l_pref = l_cont = 0.0
    for step in range(1, cfg.steps + 1):
        try:
            if cost_model is not None:
                batch = sample_partial_batch(d_u, d_n, cfg.segments_per_source, cfg.segments_per_source,
                                             cfg.segment_length, rng_seg)
                l_pref, l_cont = joint_cost_step(cost_model, c_opt, batch, cfg.gamma, rng_pair, cfg.use_contrastive)
            tb = transitions.sample(cfg.batch_size, rng_cb)
            l_q = critic_step(critic, q_opt, cost_fn, tb, policy, rng_ct, cfg.target_action)
            pb = transitions.sample(cfg.batch_size, rng_pb)
            idx = rng_s0.integers(0, len(s0_all), size=cfg.batch_size)
            bc, q_term, alpha = policy_step(policy, p_opt, critic, pb.states, pb.actions, s0_all[idx], a0_all[idx],
                                            cfg.alpha_bar, rng_pa)
        except OsilError as exc:
            raise TrainingError(step, exc) from exc
        if _should_log(step, cfg.steps, log_every):
            log.append(_log_entry(step, pref_loss=l_pref, cont_loss=l_cont, td_loss=l_q, bc_loss=bc,
                                  critic_term=q_term, alpha=alpha))
        if evaluator is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            log.append({"step": step, "eval": evaluator(policy)})
    return TrainResult(policy, log, cost_model, critic)


def train_bc(d_u, cfg, seed: int = 0, evaluator: Callable | None = None, log_every: int = 1000,
             weight_fn: Callable | None = None, name: str = "bc") -> TrainResult:
    """Plain (or weighted) behaviour cloning on union transitions.

    Uses the same initialisation and batch streams as ``train_osil`` so the
    two coincide exactly when the cost penalty is switched off.
    """
    d_u = as_learner_dataset(d_u)
    policy, p_opt = make_policy(d_u.obs_dim, d_u.action_space, cfg, seed)
    transitions = d_u.transitions()
    rng_pb = make_rng(seed, "policy_batch")
    log = []
    for step in range(1, cfg.steps + 1):
        pb = transitions.sample(cfg.batch_size, rng_pb)
        w = None if weight_fn is None else weight_fn(pb, policy)
        try:
            loss, grad = bc_loss(policy, pb.states, pb.actions, w)
            if not np.isfinite(loss):
                raise NumericError("non-finite BC loss")
            p_opt.step([grad])
        except OsilError as exc:
            raise TrainingError(step, exc) from exc
        if _should_log(step, cfg.steps, log_every):
            log.append(_log_entry(step, bc_loss=loss))
        if evaluator is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps):
            log.append({"step": step, "eval": evaluator(policy)})
    return TrainResult(policy, log)
