"""Central finite-difference checks for every training loss (20 random instances each)."""

import numpy as np
import pytest

from osil.baselines import (
    Discriminator,
    NuBatch,
    bce_discriminator_loss,
    nu_discriminator_loss,
    nu_loss,
    reward_preference_loss,
)
from osil.costcritic import CostCritic, td_loss
from osil.costmodel import CostModel, cost_losses, preference_loss, segment_contrastive_loss, supcon_loss
from osil.datakit import PartialTrajectoryBatch
from osil.diffkit import Mlp, max_relative_error, numerical_gradient
from osil.envkit import ActionSpace
from osil.policy import StochasticPolicy, adaptive_alpha, bc_loss, critic_term

TOL = 1e-5
INSTANCES = range(20)
D3 = ActionSpace("discrete", n=3)
C2 = ActionSpace("continuous", dim=2)


def param_fd(nets, loss_fn):
    """FD gradient of ``loss_fn()`` wrt each net's flat parameters."""
    out = []
    for net in nets:
        def f(theta, net=net):
            old = net.params.values.copy()
            net.params.values[:] = theta
            try:
                return loss_fn()
            finally:
                net.params.values[:] = old
        out.append(numerical_gradient(f, net.params.values.copy()))
    return out


def assert_close(analytic, numeric):
    for a, n in zip(analytic, numeric):
        assert max_relative_error(a, n) <= TOL


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.mark.parametrize("seed", INSTANCES)
def test_supcon(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    z = rng.normal(size=(n, 4))
    labels = rng.integers(0, 3, n)
    eta = float(rng.uniform(0.1, 1.0))
    _, g, _ = supcon_loss(z, labels, eta)
    num = numerical_gradient(lambda x: supcon_loss(x, labels, eta)[0], z.copy())
    assert max_relative_error(g, num) <= TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_segment_contrastive(seed):
    rng = np.random.default_rng(100 + seed)
    H = int(rng.integers(2, 5))
    z = unit_rows(rng, H * int(rng.integers(2, 4)), 3)
    _, g = segment_contrastive_loss(z, H, 0.3)
    num = numerical_gradient(lambda x: segment_contrastive_loss(x, H, 0.3)[0], z.copy())
    assert max_relative_error(g, num) <= TOL


@pytest.mark.parametrize("seed", INSTANCES)
def test_preference(seed):
    rng = np.random.default_rng(200 + seed)
    c_n, c_u = rng.normal(size=4) * 2, rng.normal(size=4) * 2
    _, g_n, g_u = preference_loss(c_n, c_u)
    assert max_relative_error(g_n, numerical_gradient(lambda x: preference_loss(x, c_u)[0], c_n.copy())) <= TOL
    assert max_relative_error(g_u, numerical_gradient(lambda x: preference_loss(c_n, x)[0], c_u.copy())) <= TOL


def segment_batch(rng, space, n_u=3, n_n=2, H=3, obs=3):
    n = n_u + n_n
    if space.discrete:
        acts = rng.integers(0, space.n, size=(n, H))
    else:
        acts = rng.uniform(-0.9, 0.9, size=(n, H, space.dim))
    return PartialTrajectoryBatch(rng.normal(size=(n, H + 1, obs)), acts, np.zeros((n, H), bool),
                                  np.array([0] * n_u + [1] * n_n), np.arange(n), np.zeros(n, int))


@pytest.mark.parametrize("seed", INSTANCES)
@pytest.mark.parametrize("mode", ["joint", "preference", "contrastive"])
def test_cost_model_losses(seed, mode):
    rng = np.random.default_rng(300 + seed)
    model = CostModel(3, D3, (5,), 4, float(rng.uniform(0.2, 1.0)), rng=rng)
    batch = segment_batch(rng, D3)
    partners = rng.integers(0, 3, 2)
    kw = {"use_contrastive": mode != "preference", "use_preference": mode != "contrastive"}
    out = cost_losses(model, batch, 0.9, partners, **kw)
    num = param_fd(model.nets, lambda: cost_losses(model, batch, 0.9, partners, **kw).total)
    assert_close(out.grads, num)


@pytest.mark.parametrize("seed", INSTANCES)
def test_td_loss(seed):
    rng = np.random.default_rng(400 + seed)
    critic = CostCritic(3, D3, (6,), rng=rng)
    s, a, y = rng.normal(size=(7, 3)), rng.integers(0, 3, 7), rng.normal(size=7)
    _, g = td_loss(critic, s, a, y)
    assert_close([g], param_fd([critic.q_net], lambda: td_loss(critic, s, a, y)[0]))


@pytest.mark.parametrize("seed", INSTANCES)
@pytest.mark.parametrize("space", [D3, C2], ids=["discrete", "continuous"])
def test_bc_loss(seed, space):
    rng = np.random.default_rng(500 + seed)
    pi = StochasticPolicy(3, space, (5,), rng=rng)
    obs = rng.normal(size=(6, 3))
    acts = rng.integers(0, 3, 6) if space.discrete else rng.uniform(-0.95, 0.95, size=(6, 2))
    w = rng.uniform(0.1, 2.0, 6)
    _, g = bc_loss(pi, obs, acts, w)
    assert_close([g], param_fd([pi.net], lambda: bc_loss(pi, obs, acts, w)[0]))


@pytest.mark.parametrize("seed", INSTANCES)
@pytest.mark.parametrize("space", [D3, C2], ids=["discrete", "continuous"])
def test_policy_objective(seed, space):
    """``bc + alpha * Q(s0, pi(s0))`` with alpha held fixed at its current value."""
    rng = np.random.default_rng(600 + seed)
    pi = StochasticPolicy(3, space, (5,), rng=rng)
    critic = CostCritic(3, space, (6,), rng=rng)
    obs = rng.normal(size=(6, 3))
    acts = rng.integers(0, 3, 6) if space.discrete else rng.uniform(-0.9, 0.9, size=(6, 2))
    s0 = rng.normal(size=(4, 3))
    a0 = acts[:4]
    noise_seed = int(rng.integers(1 << 30))

    def parts():
        bc, g_bc = bc_loss(pi, obs, acts)
        val, g_q, q_pi = critic_term(pi, critic, s0, np.random.default_rng(noise_seed))
        return bc, g_bc, val, g_q, q_pi

    _, g_bc, _, g_q, q_pi = parts()
    alpha = adaptive_alpha(critic.q(s0, a0), q_pi, 0.7)
    grad = g_bc + alpha * g_q

    def total():
        bc, _, val, _, _ = parts()
        return bc + alpha * val

    assert_close([grad], param_fd([pi.net], total))


@pytest.mark.parametrize("seed", INSTANCES)
def test_nu_discriminator(seed):
    rng = np.random.default_rng(700 + seed)
    disc = Discriminator(4, (5,), rng=rng)
    x_n, x_u = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
    eta = float(rng.uniform(0.1, 0.9))
    _, g = nu_discriminator_loss(disc, x_n, x_u, eta)
    assert_close([g], param_fd([disc.net], lambda: nu_discriminator_loss(disc, x_n, x_u, eta)[0]))


@pytest.mark.parametrize("seed", INSTANCES)
@pytest.mark.parametrize("gp", [0.0, 10.0])
def test_bce_discriminator(seed, gp):
    rng = np.random.default_rng(800 + seed)
    disc = Discriminator(4, (5,), rng=rng)
    xp, xn = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    gp_seed = int(rng.integers(1 << 30))
    loss = lambda: bce_discriminator_loss(disc, xp, xn, gp, np.random.default_rng(gp_seed))
    _, g = loss()
    assert_close([g], param_fd([disc.net], lambda: loss()[0]))


@pytest.mark.parametrize("seed", INSTANCES)
def test_reward_preference(seed):
    rng = np.random.default_rng(900 + seed)
    net = Mlp([3 + 3, 5, 1], "tanh", rng=rng)
    batch = segment_batch(rng, D3)
    partners = rng.integers(0, 3, 2)
    _, g = reward_preference_loss(net, batch, partners, D3, 0.95)
    assert_close([g], param_fd([net], lambda: reward_preference_loss(net, batch, partners, D3, 0.95)[0]))


@pytest.mark.parametrize("seed", INSTANCES)
def test_nu_loss(seed):
    rng = np.random.default_rng(1000 + seed)
    nu = Mlp([3, 5, 1], "tanh", rng=rng)
    b = NuBatch(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 3)),
                rng.random(6) < 0.3, rng.normal(size=6))
    _, g = nu_loss(nu, b, 0.9)
    assert_close([g], param_fd([nu], lambda: nu_loss(nu, b, 0.9)[0]))
