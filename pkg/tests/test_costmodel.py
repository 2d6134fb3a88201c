import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osil.costmodel import (
    CostModel,
    cost_losses,
    discount_weights,
    joint_cost_step,
    p_non,
    preference_loss,
    segment_contrastive_loss,
    supcon_loss,
)
from osil.datakit import PartialTrajectoryBatch, sample_partial_batch
from osil.diffkit import Adam
from osil.envkit import ActionSpace
from osil.errors import SamplingError


def scalar_supcon(z, labels, eta):
    """Direct double loop over anchors, positives and candidates."""
    n = len(z)
    per = []
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            per.append(None)
            continue
        den = sum(math.exp(float(z[i] @ z[k]) / eta) for k in range(n) if k != i)
        per.append(-sum(math.log(math.exp(float(z[i] @ z[p]) / eta) / den) for p in pos) / len(pos))
    return per


def unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_single_two_pair_segment_has_zero_loss():
    z = unit(np.random.default_rng(0), 2, 4)
    loss, grad = segment_contrastive_loss(z, 2, 0.1)
    assert loss == 0.0


def test_identical_embeddings_give_log_batch_minus_one():
    z = np.tile(unit(np.random.default_rng(1), 1, 3), (10, 1))
    loss, _ = segment_contrastive_loss(z, 5, 0.1)
    assert loss == pytest.approx(math.log(9), abs=1e-12)


def test_two_segments_hand_fixed_embeddings():
    z = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.6, 0.8]])
    loss, _ = segment_contrastive_loss(z, 2, 0.1)
    oracle = np.mean(scalar_supcon(z, [0, 0, 1, 1], 0.1))
    assert loss == pytest.approx(oracle, abs=1e-12)


def test_segment_of_length_one_rejected():
    with pytest.raises(SamplingError):
        segment_contrastive_loss(np.eye(3), 1, 0.1)


def test_supcon_two_same_label_zero():
    loss, _, skipped = supcon_loss(unit(np.random.default_rng(2), 2, 3), [7, 7], 0.1)
    assert loss == 0.0 and skipped.size == 0


def test_supcon_identical_four_samples_log3():
    z = np.tile([[0.0, 1.0]], (4, 1))
    per, _, _ = supcon_loss(z, [0, 0, 1, 1], 0.1, reduction="none")
    np.testing.assert_allclose(per, math.log(3), atol=1e-12)


def test_supcon_random_instance_matches_oracle():
    rng = np.random.default_rng(3)
    z = unit(rng, 6, 4)
    labels = [0, 1, 0, 2, 1, 2]
    loss, _, _ = supcon_loss(z, labels, 0.1)
    assert abs(loss - sum(scalar_supcon(z, labels, 0.1))) <= 1e-9


def test_supcon_singleton_anchor_skipped_and_reported():
    z = unit(np.random.default_rng(4), 5, 3)
    labels = [0, 0, 1, 1, 2]
    loss, _, skipped = supcon_loss(z, labels, 0.2)
    assert list(skipped) == [4]
    oracle = scalar_supcon(z, labels, 0.2)
    assert loss == pytest.approx(sum(v for v in oracle if v is not None), abs=1e-12)


def test_contrastive_invariant_to_segment_order():
    rng = np.random.default_rng(5)
    z = unit(rng, 12, 4)
    perm = np.array([2, 0, 1])
    z_perm = z.reshape(3, 4, 4)[perm].reshape(12, 4)
    a, _ = segment_contrastive_loss(z, 4, 0.1)
    b, _ = segment_contrastive_loss(z_perm, 4, 0.1)
    assert a == pytest.approx(b, abs=1e-12)


def test_preference_symmetric_pair_is_ln2():
    loss, _, _ = preference_loss(1.7, 1.7)
    assert abs(loss - math.log(2)) <= 1e-12
    assert p_non(1.7, 1.7) == 0.5


def test_preference_large_margin():
    loss, _, _ = preference_loss(10.0, 0.0)
    assert loss == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert loss == pytest.approx(4.5399e-5, rel=1e-4)


def test_preference_strictly_decreasing_in_margin():
    grid = np.linspace(-20, 20, 401)
    losses = [preference_loss(d, 0.0)[0] for d in grid]
    assert all(b < a for a, b in zip(losses, losses[1:]))


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_bradley_terry_antisymmetry(a, b):
    assert p_non(a, b) + p_non(b, a) == pytest.approx(1.0, abs=1e-15)


def small_batch(rng, n_u=3, n_n=2, H=3, obs=3, A=4):
    n = n_u + n_n
    return PartialTrajectoryBatch(
        rng.normal(size=(n, H + 1, obs)), rng.integers(0, A, size=(n, H)), np.zeros((n, H), bool),
        np.array([0] * n_u + [1] * n_n), np.arange(n), np.zeros(n, int))


def test_joint_gradient_is_sum_of_term_gradients():
    rng = np.random.default_rng(6)
    model = CostModel(3, ActionSpace("discrete", n=4), (6,), 4, 0.1, rng=rng)
    batch = small_batch(rng)
    partners = np.array([0, 2])
    both = cost_losses(model, batch, 0.9, partners)
    pref = cost_losses(model, batch, 0.9, partners, use_contrastive=False)
    cont = cost_losses(model, batch, 0.9, partners, use_preference=False)
    for g, gp, gc in zip(both.grads, pref.grads, cont.grads):
        np.testing.assert_allclose(g, gp + gc, atol=1e-14)
    assert both.total == pytest.approx(pref.preference + cont.contrastive)


def test_trajectory_cost_is_discounted_sum_of_per_step(datasets):
    d_u, _ = datasets
    model = CostModel(d_u.obs_dim, d_u.action_space, (8,), 4, rng=np.random.default_rng(0))
    t = d_u.trajectories[0]
    c = model.per_step(t.states[:-1], t.actions)
    assert model.trajectory_cost(t.states, t.actions, 0.95) == pytest.approx(float(np.sum(0.95 ** np.arange(len(c)) * c)))
    assert np.all((c > 0) & (c < 1))
    bound = (1 - 0.95 ** t.length) / (1 - 0.95)
    assert 0 <= model.trajectory_cost(t.states, t.actions, 0.95) < bound


def test_joint_step_requires_both_labels(datasets):
    d_u, d_n = datasets
    model = CostModel(d_u.obs_dim, d_u.action_space, (8,), 4, rng=np.random.default_rng(0))
    opt = Adam(model.nets, 1e-3)
    only_n = sample_partial_batch(d_u, d_n, 0, 4, 5, seed=0)
    with pytest.raises(SamplingError):
        joint_cost_step(model, opt, only_n, 0.99, np.random.default_rng(0))


def test_ablation_without_contrastive_trains(datasets):
    d_u, d_n = datasets
    model = CostModel(d_u.obs_dim, d_u.action_space, (8,), 4, rng=np.random.default_rng(0))
    opt = Adam(model.nets, 1e-3)
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = sample_partial_batch(d_u, d_n, 4, 4, 5, rng)
        l_pref, l_cont = joint_cost_step(model, opt, b, 0.99, rng, use_contrastive=False)
        assert l_cont == 0.0 and np.isfinite(l_pref)


def test_discount_weights_restart_at_segment_start():
    np.testing.assert_allclose(discount_weights(3, 0.5), [1.0, 0.5, 0.25])
