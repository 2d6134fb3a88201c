"""Comparison learners: BC-Union, DWBC, PPL and SafeDICE.

All of them read the same stripped dataset views as OSIL and reuse the
policy module's BC loss; they differ only in how per-sample BC weights are
produced.  Weights are always computed outside the policy graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datakit import as_learner_dataset, sample_partial_batch
from .diffkit import Adam, Mlp, make_rng, sigmoid
from .envkit import ActionSpace
from .errors import ConfigError, NumericError
from .policy import TrainResult, train_bc

D_CLAMP = 1e-6


def _pretrain_steps(cfg) -> int:
    return cfg.pretrain_steps if cfg.pretrain_steps is not None else max(cfg.steps // 5, 1)


def log_mean_exp(x) -> float:
    x = np.asarray(x, dtype=float)
    m = float(np.max(x))
    return m + float(np.log(np.mean(np.exp(x - m))))


def sa_features(states, actions, action_space: ActionSpace) -> np.ndarray:
    return np.concatenate([np.asarray(states, dtype=float), action_space.encode(actions)], axis=1)


# ---------------------------------------------------------------------------
# BC-Union


def train_bc_union(d_u, cfg, seed: int = 0, evaluator=None, log_every: int = 1000) -> TrainResult:
    return train_bc(d_u, cfg, seed, evaluator, log_every)


# ---------------------------------------------------------------------------
# discriminators


class Discriminator:
    """Sigmoid-output MLP on ``s ⊕ a`` (optionally ``⊕ log pi(a|s)``)."""

    def __init__(self, in_dim: int, hidden, activation="tanh", input_mode="state_action", rng=None):
        if input_mode not in ("state_action", "state_action_logpi"):
            raise ConfigError(f"unknown discriminator input mode {input_mode!r}")
        self.input_mode = input_mode
        self.net = Mlp([in_dim, *hidden, 1], activation, "sigmoid", rng=rng)

    def __call__(self, x) -> np.ndarray:
        return np.clip(self.net(x)[:, 0], D_CLAMP, 1.0 - D_CLAMP)


def nu_discriminator_loss(disc: Discriminator, x_n, x_u, eta: float) -> tuple[float, np.ndarray]:
    """Negative-unlabeled objective ``eta E_N[-log d] + E_U[-log(1-d)] - eta E_N[-log(1-d)]``.

    ``d`` is clamped to ``[1e-6, 1-1e-6]``; the clamp blocks gradients.
    """
    x = np.concatenate([x_n, x_u])
    n_n = len(x_n)
    out, cache = disc.net.forward(x, return_cache=True)
    raw = out[:, 0]
    d = np.clip(raw, D_CLAMP, 1.0 - D_CLAMP)
    live = (raw > D_CLAMP) & (raw < 1.0 - D_CLAMP)
    dn, du = d[:n_n], d[n_n:]
    loss = eta * np.mean(-np.log(dn)) + np.mean(-np.log(1.0 - du)) - eta * np.mean(-np.log(1.0 - dn))
    g = np.empty_like(d)
    g[:n_n] = eta * (-1.0 / dn - 1.0 / (1.0 - dn)) / n_n
    g[n_n:] = (1.0 / (1.0 - du)) / len(x_u)
    grad, _ = disc.net.backward(cache, (g * live)[:, None])
    return float(loss), grad


def bce_discriminator_loss(disc: Discriminator, x_pos, x_neg, gp_coef: float = 0.0, rng=None):
    """``-E_pos[log c] - E_neg[log(1-c)]`` plus ``gp_coef (|grad_x logit| - 1)^2`` at interpolates."""
    x = np.concatenate([x_pos, x_neg])
    n_p = len(x_pos)
    out, cache = disc.net.forward(x, return_cache=True)
    raw = out[:, 0]
    c = np.clip(raw, D_CLAMP, 1.0 - D_CLAMP)
    live = (raw > D_CLAMP) & (raw < 1.0 - D_CLAMP)
    loss = float(np.mean(-np.log(c[:n_p])) + np.mean(-np.log(1.0 - c[n_p:])))
    g = np.empty_like(c)
    g[:n_p] = -1.0 / c[:n_p] / n_p
    g[n_p:] = 1.0 / (1.0 - c[n_p:]) / len(x_neg)
    grad, _ = disc.net.backward(cache, (g * live)[:, None])
    gp = 0.0
    if gp_coef > 0.0:
        m = min(len(x_pos), len(x_neg))
        eps = rng.random((m, 1))
        x_hat = eps * x_pos[:m] + (1.0 - eps) * x_neg[:m]
        u, state = disc.net.logit_input_gradient(x_hat, return_cache=True)
        norm = np.linalg.norm(u, axis=1)
        gp = float(gp_coef * np.mean((norm - 1.0) ** 2))
        u_bar = (gp_coef * 2.0 * (norm - 1.0) / np.maximum(norm, 1e-12) / m)[:, None] * u
        grad = grad + disc.net.logit_input_gradient_vjp(state, u_bar)
    return loss + gp, grad


def dwbc_weights(d) -> np.ndarray:
    return 1.0 - np.asarray(d, dtype=float)


def train_dwbc(d_n, d_u, cfg, seed: int = 0, evaluator=None, log_every: int = 1000) -> TrainResult:
    """Alternating discriminator and ``(1 - d)``-weighted BC updates."""
    d_n, d_u = as_learner_dataset(d_n), as_learner_dataset(d_u)
    space = d_u.action_space
    width = d_u.obs_dim + space.feature_dim + 1
    disc = Discriminator(width, cfg.critic_hidden, cfg.activation, "state_action_logpi", make_rng(seed, "disc_init"))
    d_opt = Adam([disc.net], cfg.lr_critic, cfg.weight_decay, cfg.max_grad_norm)
    t_n, t_u = d_n.transitions(), d_u.transitions()
    rng_d = make_rng(seed, "disc_batch")
    state = {"step": 0}
    losses = []

    def disc_input(policy, s, a):
        return np.concatenate([sa_features(s, a, space), policy.log_prob(s, a)[:, None]], axis=1)

    def weight_fn(batch, policy):
        bn, bu = t_n.sample(cfg.batch_size, rng_d), t_u.sample(cfg.batch_size, rng_d)
        loss, grad = nu_discriminator_loss(disc, disc_input(policy, bn.states, bn.actions),
                                           disc_input(policy, bu.states, bu.actions), cfg.dwbc_eta)
        d_opt.step([grad])
        losses.append(loss)
        state["step"] += 1
        return dwbc_weights(disc(disc_input(policy, batch.states, batch.actions)))

    res = train_bc(d_u, cfg, seed, evaluator, log_every, weight_fn=weight_fn, name="dwbc")
    res.extras = {"discriminator": disc, "disc_losses": losses}
    return res


# ---------------------------------------------------------------------------
# PPL


def segment_returns(reward_net: Mlp, batch, space: ActionSpace, gamma: float):
    n, H = batch.actions.shape[:2]
    x = sa_features(batch.states[:, :H].reshape(n * H, -1), batch.actions.reshape((n * H,) + batch.actions.shape[2:]), space)
    out, cache = reward_net.forward(x, return_cache=True)
    w = gamma ** np.arange(H, dtype=float)
    return out[:, 0].reshape(n, H) @ w, cache, w


def reward_preference_loss(reward_net: Mlp, batch, partners, space: ActionSpace, gamma: float):
    """Bradley-Terry ``-log sigma(R(tau_U) - R(tau_N))`` over (union, non-preferred) pairs."""
    R, cache, w = segment_returns(reward_net, batch, space, gamma)
    nonpref = np.flatnonzero(batch.labels == 1)
    delta = R[partners] - R[nonpref]
    loss = float(np.mean(np.logaddexp(0.0, -delta)))
    g_delta = -sigmoid(-delta) / delta.size
    g_seg = np.zeros(len(R))
    np.add.at(g_seg, partners, g_delta)
    np.add.at(g_seg, nonpref, -g_delta)
    grad, _ = reward_net.backward(cache, (g_seg[:, None] * w[None, :]).reshape(-1, 1))
    return loss, grad


def ppl_weights(r) -> np.ndarray:
    """Min-shift to nonnegative, then scale to unit batch mean (uniform if all equal)."""
    r = np.asarray(r, dtype=float)
    w = r - r.min()
    mean = w.mean()
    if not mean > 0.0:
        return np.ones_like(r)
    return w / mean


def train_ppl(d_n, d_u, cfg, seed: int = 0, evaluator=None, log_every: int = 1000) -> TrainResult:
    """Reward model from union-over-non-preferred preferences, then reward-weighted BC."""
    d_n, d_u = as_learner_dataset(d_n), as_learner_dataset(d_u)
    space = d_u.action_space
    reward = Mlp([d_u.obs_dim + space.feature_dim, *cfg.cost_hidden, 1], cfg.activation, rng=make_rng(seed, "reward_init"))
    r_opt = Adam([reward], cfg.lr_cost, cfg.weight_decay, cfg.max_grad_norm)
    rng_seg, rng_pair = make_rng(seed, "reward_batch"), make_rng(seed, "reward_pairs")
    losses = []
    for _ in range(_pretrain_steps(cfg)):
        batch = sample_partial_batch(d_u, d_n, cfg.segments_per_source, cfg.segments_per_source, cfg.segment_length, rng_seg)
        union = np.flatnonzero(batch.labels == 0)
        partners = union[rng_pair.integers(0, union.size, size=int((batch.labels == 1).sum()))]
        loss, grad = reward_preference_loss(reward, batch, partners, space, cfg.gamma)
        if not np.isfinite(loss):
            raise NumericError("non-finite reward-model loss")
        r_opt.step([grad])
        losses.append(loss)

    def weight_fn(batch, policy):
        return ppl_weights(reward(sa_features(batch.states, batch.actions, space))[:, 0])

    res = train_bc(d_u, cfg, seed, evaluator, log_every, weight_fn=weight_fn, name="ppl")
    res.extras = {"reward_model": reward, "reward_losses": losses}
    return res


# ---------------------------------------------------------------------------
# SafeDICE


def safedice_log_ratio(c, alpha: float) -> np.ndarray:
    """``log[(1 - (1+alpha) c) / ((1-alpha)(1-c))]`` with ``c`` clamped into the domain."""
    c = np.minimum(np.asarray(c, dtype=float), (1.0 - D_CLAMP) / (1.0 + alpha))
    num = 1.0 - (1.0 + alpha) * c
    den = (1.0 - alpha) * (1.0 - c)
    if np.any(num <= 0) or np.any(den <= 0):
        raise NumericError("log-ratio argument left its domain")
    return np.log(num) - np.log(den)


@dataclass
class NuBatch:
    s0: np.ndarray
    states: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    r: np.ndarray


def nu_advantage(nu: Mlp, b: NuBatch, gamma: float) -> np.ndarray:
    mask = 1.0 - b.terminals.astype(float)
    return b.r + gamma * mask * nu(b.next_states)[:, 0] - nu(b.states)[:, 0]


def nu_loss(nu: Mlp, b: NuBatch, gamma: float) -> tuple[float, np.ndarray]:
    """``(1-gamma) E_s0[nu] + log E_U[exp(r + gamma nu(s') - nu(s))]`` and its gradient."""
    mask = 1.0 - b.terminals.astype(float)
    v0, c0 = nu.forward(b.s0, return_cache=True)
    v1, c1 = nu.forward(b.next_states, return_cache=True)
    v, c = nu.forward(b.states, return_cache=True)
    A = b.r + gamma * mask * v1[:, 0] - v[:, 0]
    loss = (1.0 - gamma) * float(np.mean(v0)) + log_mean_exp(A)
    p = np.exp(A - A.max())
    p /= p.sum()
    g0, _ = nu.backward(c0, np.full((len(b.s0), 1), (1.0 - gamma) / len(b.s0)))
    g1, _ = nu.backward(c1, (gamma * mask * p)[:, None])
    g, _ = nu.backward(c, -p[:, None])
    return loss, g0 + g1 + g


def safedice_weights(A) -> np.ndarray:
    """Self-normalised ``exp(A)`` with unit batch mean."""
    A = np.asarray(A, dtype=float)
    e = np.exp(A - A.max())
    return e / e.mean()


def train_safedice(d_n, d_u, cfg, seed: int = 0, evaluator=None, log_every: int = 1000) -> TrainResult:
    """Discriminator, then nu, then ``exp(A_nu)``-weighted BC."""
    d_n, d_u = as_learner_dataset(d_n), as_learner_dataset(d_u)
    space, alpha = d_u.action_space, cfg.safedice_alpha
    width = d_u.obs_dim + space.feature_dim
    disc = Discriminator(width, cfg.critic_hidden, cfg.activation, "state_action", make_rng(seed, "disc_init"))
    d_opt = Adam([disc.net], cfg.lr_critic, cfg.weight_decay, cfg.max_grad_norm)
    t_n, t_u = d_n.transitions(), d_u.transitions()
    s0_all, _ = d_u.initial_pairs()
    rng_d, rng_gp = make_rng(seed, "disc_batch"), make_rng(seed, "disc_gp")
    n_pre = _pretrain_steps(cfg)
    disc_losses, nu_losses = [], []
    for _ in range(n_pre):
        bn, bu = t_n.sample(cfg.batch_size, rng_d), t_u.sample(cfg.batch_size, rng_d)
        loss, grad = bce_discriminator_loss(disc, sa_features(bn.states, bn.actions, space),
                                            sa_features(bu.states, bu.actions, space), cfg.safedice_gp, rng_gp)
        d_opt.step([grad])
        disc_losses.append(loss)

    nu = Mlp([d_u.obs_dim, *cfg.critic_hidden, 1], cfg.activation, rng=make_rng(seed, "nu_init"))
    nu_opt = Adam([nu], cfg.lr_critic, cfg.weight_decay, cfg.max_grad_norm)
    rng_nu = make_rng(seed, "nu_batch")

    def nu_batch(tb, rng):
        r = safedice_log_ratio(disc(sa_features(tb.states, tb.actions, space)), alpha)
        s0 = s0_all[rng.integers(0, len(s0_all), size=len(tb.states))]
        return NuBatch(s0, tb.states, tb.next_states, tb.terminals, r)

    for _ in range(n_pre):
        b = nu_batch(t_u.sample(cfg.batch_size, rng_nu), rng_nu)
        loss, grad = nu_loss(nu, b, cfg.gamma)
        if not np.isfinite(loss):
            raise NumericError("non-finite nu loss")
        nu_opt.step([grad])
        nu_losses.append(loss)

    rng_w = make_rng(seed, "weight_s0")

    def weight_fn(batch, policy):
        return safedice_weights(nu_advantage(nu, nu_batch(batch, rng_w), cfg.gamma))

    res = train_bc(d_u, cfg, seed, evaluator, log_every, weight_fn=weight_fn, name="safedice")
    res.extras = {"discriminator": disc, "nu": nu, "disc_losses": disc_losses, "nu_losses": nu_losses}
    return res


TRAINERS = {
    "bc": lambda d_u, d_n, cfg, seed, **kw: train_bc_union(d_u, cfg, seed, **kw),
    "dwbc": lambda d_u, d_n, cfg, seed, **kw: train_dwbc(d_n, d_u, cfg, seed, **kw),
    "ppl": lambda d_u, d_n, cfg, seed, **kw: train_ppl(d_n, d_u, cfg, seed, **kw),
    "safedice": lambda d_u, d_n, cfg, seed, **kw: train_safedice(d_n, d_u, cfg, seed, **kw),
}
