import dataclasses
import math

import numpy as np
import pytest

from osil.baselines import (
    TRAINERS,
    Discriminator,
    NuBatch,
    bce_discriminator_loss,
    dwbc_weights,
    log_mean_exp,
    nu_discriminator_loss,
    nu_loss,
    ppl_weights,
    reward_preference_loss,
    safedice_log_ratio,
    safedice_weights,
)
from osil.config import desk_config
from osil.datakit import sample_partial_batch
from osil.diffkit import Adam, Mlp, max_relative_error, numerical_gradient
from osil.envkit import ActionSpace
from osil.errors import NumericError
from osil.policy import StochasticPolicy, bc_loss

D4 = ActionSpace("discrete", n=4)


def rand_bc(seed=0, n=10):
    rng = np.random.default_rng(seed)
    pi = StochasticPolicy(3, D4, (6,), rng=rng)
    return pi, rng.normal(size=(n, 3)), rng.integers(0, 4, n)


def test_half_discriminator_halves_bc():
    pi, obs, acts = rand_bc()
    plain, g = bc_loss(pi, obs, acts)
    half, gh = bc_loss(pi, obs, acts, dwbc_weights(np.full(len(acts), 0.5)))
    assert half == pytest.approx(0.5 * plain, rel=1e-14)
    np.testing.assert_allclose(gh, 0.5 * g, rtol=1e-12, atol=1e-15)


def test_nu_objective_with_zero_eta_is_union_bce():
    rng = np.random.default_rng(1)
    disc = Discriminator(5, (6,), rng=rng)
    x_n, x_u = rng.normal(size=(7, 5)), rng.normal(size=(9, 5))
    loss, grad = nu_discriminator_loss(disc, x_n, x_u, 0.0)
    assert loss == pytest.approx(np.mean(-np.log(1.0 - disc(x_u))), rel=1e-12)
    _, grad_alone = nu_discriminator_loss(disc, x_n[:1] * 0 + 3.0, x_u, 0.0)
    np.testing.assert_allclose(grad, grad_alone, atol=1e-15)


def auc(scores_pos, scores_neg):
    """Mann-Whitney statistic by direct pair counting."""
    sp, sn = np.asarray(scores_pos)[:, None], np.asarray(scores_neg)[None, :]
    return float(np.mean((sp > sn) + 0.5 * (sp == sn)))


def test_nu_discriminator_separates_synthetic_clusters():
    rng = np.random.default_rng(2)
    neg_center, pos_center = np.array([2.0, 2.0, 0, 0]), np.array([-2.0, -2.0, 0, 0])

    def draw(center, n):
        return center + 0.7 * rng.normal(size=(n, 4))

    disc = Discriminator(4, (16,), rng=np.random.default_rng(0))
    opt = Adam([disc.net], 1e-2)
    for _ in range(400):
        x_n = draw(neg_center, 32)
        hidden = rng.random(64) < 0.4
        x_u = np.where(hidden[:, None], draw(neg_center, 64), draw(pos_center, 64))
        _, grad = nu_discriminator_loss(disc, x_n, x_u, 0.5)
        opt.step([grad])
    test_bad, test_good = draw(neg_center, 200), draw(pos_center, 200)
    assert auc(disc(test_bad), disc(test_good)) >= 0.9


def test_discriminator_clamped():
    disc = Discriminator(2, (), rng=np.random.default_rng(0))
    disc.net.params.values[:] = [100.0, 0.0, 0.0]
    d = disc(np.array([[10.0, 0.0], [-10.0, 0.0]]))
    assert d[0] == 1.0 - 1e-6 and d[1] == 1e-6


def test_identical_rewards_give_ln2(datasets):
    d_u, d_n = datasets
    batch = sample_partial_batch(d_u, d_n, 4, 4, 5, seed=0)
    net = Mlp([d_u.obs_dim + 4, 8, 1], "tanh", rng=np.random.default_rng(0))
    net.params.values[:] = 0.0
    union = np.flatnonzero(batch.labels == 0)
    loss, _ = reward_preference_loss(net, batch, union[:4], D4, 0.99)
    assert abs(loss - math.log(2)) <= 1e-12


def test_constant_reward_gives_plain_bc():
    pi, obs, acts = rand_bc(3)
    w = ppl_weights(np.ones(len(acts)))
    np.testing.assert_array_equal(w, 1.0)
    assert bc_loss(pi, obs, acts, w)[0] == bc_loss(pi, obs, acts)[0]


def test_ppl_weights_nonnegative_unit_mean():
    w = ppl_weights(np.array([-3.0, 0.5, 2.0, -1.0]))
    assert np.all(w >= 0) and w.mean() == pytest.approx(1.0)


def test_symmetric_safedice_discriminator_gives_zero_ratio():
    assert safedice_log_ratio(np.array([0.5]), 0.0)[0] == 0.0


def test_safedice_ratio_clamps_into_domain():
    r = safedice_log_ratio(np.array([0.99, 0.999999]), 0.1)
    assert np.all(np.isfinite(r))
    with pytest.raises(NumericError):
        safedice_log_ratio(np.array([0.2]), 1.0)


def test_constant_safedice_weights_give_plain_bc():
    pi, obs, acts = rand_bc(4)
    w = safedice_weights(np.full(len(acts), 2.3))
    np.testing.assert_allclose(w, 1.0, rtol=0, atol=1e-15)
    assert bc_loss(pi, obs, acts, w)[0] == pytest.approx(bc_loss(pi, obs, acts)[0], rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_log_mean_exp_matches_direct(seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=6)
    assert abs(log_mean_exp(x) - math.log(sum(math.exp(v) for v in x) / len(x))) <= 1e-9


def test_nu_loss_matches_direct_evaluation():
    rng = np.random.default_rng(6)
    nu = Mlp([3, 5, 1], "tanh", rng=rng)
    b = NuBatch(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
                np.array([0, 0, 1, 0, 0, 1], bool), rng.normal(size=6))
    loss, _ = nu_loss(nu, b, 0.9)
    v = lambda s: [float(nu(np.asarray([x]))[0, 0]) for x in s]
    v0, v1, vs = v(b.s0), v(b.next_states), v(b.states)
    adv = [b.r[i] + 0.9 * (1 - b.terminals[i]) * v1[i] - vs[i] for i in range(6)]
    direct = 0.1 * sum(v0) / 4 + math.log(sum(math.exp(a) for a in adv) / 6)
    assert abs(loss - direct) <= 1e-9


def test_nu_objective_decreases_on_fixed_discriminator(datasets):
    d_u, _ = datasets
    ld = d_u.learner_view()
    t_u = ld.transitions()
    s0_all, _ = ld.initial_pairs()
    disc = Discriminator(ld.obs_dim + 4, (8,), rng=np.random.default_rng(0))
    nu = Mlp([ld.obs_dim, 16, 1], "tanh", rng=np.random.default_rng(1))
    opt = Adam([nu], 1e-3)
    rng = np.random.default_rng(2)
    losses = []
    for _ in range(1000):
        tb = t_u.sample(64, rng)
        x = np.concatenate([tb.states, D4.encode(tb.actions)], axis=1)
        b = NuBatch(s0_all[rng.integers(0, len(s0_all), 64)], tb.states, tb.next_states, tb.terminals,
                    safedice_log_ratio(disc(x), 0.1))
        loss, grad = nu_loss(nu, b, 0.99)
        opt.step([grad])
        losses.append(loss)
    windows = np.array(losses).reshape(5, 200).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-3)


def test_gradient_penalty_raises_loss_by_penalty(datasets):
    rng = np.random.default_rng(7)
    disc = Discriminator(4, (6,), rng=rng)
    xp, xn = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    base, _ = bce_discriminator_loss(disc, xp, xn)
    with_gp, _ = bce_discriminator_loss(disc, xp, xn, 10.0, np.random.default_rng(0))
    assert with_gp >= base


def test_weights_are_detached_from_policy():
    """The BC gradient with policy-dependent weights equals the fixed-weight gradient."""
    pi, obs, acts = rand_bc(8)
    disc = Discriminator(3 + 4 + 1, (6,), rng=np.random.default_rng(9))
    x = np.concatenate([obs, D4.encode(acts), pi.log_prob(obs, acts)[:, None]], axis=1)
    w = dwbc_weights(disc(x))
    _, grad = bc_loss(pi, obs, acts, w)

    def fixed_weight_loss(theta):
        old = pi.net.params.values.copy()
        pi.net.params.values[:] = theta
        val = bc_loss(pi, obs, acts, w)[0]
        pi.net.params.values[:] = old
        return val

    assert max_relative_error(grad, numerical_gradient(fixed_weight_loss, pi.net.params.values.copy())) <= 1e-5


@pytest.mark.parametrize("algo", ["bc", "dwbc", "ppl", "safedice"])
def test_baselines_train_on_stripped_views(datasets, algo):
    d_u, d_n = datasets
    lu, ln = d_u.learner_view(), d_n.learner_view()
    assert not hasattr(lu.trajectories[0], "hidden_costs")
    assert not hasattr(lu.trajectories[0], "hidden_rewards")
    cfg = dataclasses.replace(desk_config().train, steps=30, batch_size=16, actor_hidden=[8], critic_hidden=[8],
                              cost_hidden=[8], segments_per_source=3)
    res = TRAINERS[algo](lu, ln, cfg, 0, log_every=10)
    assert np.all(np.isfinite(res.policy.net.params.values))
    assert res.log[-1]["step"] == 30
