"""Learned per-step cost: a unit-norm encoder followed by a sigmoid linear head.

Training combines a within-segment contrastive loss on the embeddings with a
Bradley-Terry loss that ranks non-preferred segments above union segments by
discounted predicted cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datakit import PartialTrajectoryBatch
from .diffkit import Adam, Mlp, sigmoid
from .envkit import ActionSpace
from .errors import ConfigError, SamplingError


def supcon_loss(z, labels, eta: float, reduction: str = "sum"):
    """Supervised contrastive loss over embeddings ``z`` (rows) with class ``labels``.

    Positives of anchor i are the other rows with the same label; the
    denominator runs over every row except i.  Anchors without positives are
    skipped.  Returns ``(loss, d loss / d z, skipped_anchor_indices)``.
    """
    z = np.asarray(z, dtype=float)
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ConfigError("need at least two samples")
    if eta <= 0:
        raise ConfigError("temperature must be positive")
    S = (z @ z.T) / eta
    diag = np.arange(n)
    S_masked = S.copy()
    S_masked[diag, diag] = -np.inf
    m = S_masked.max(axis=1, keepdims=True)
    E = np.exp(S_masked - m)
    denom = E.sum(axis=1, keepdims=True)
    lse = (m + np.log(denom))[:, 0]
    pos = labels[:, None] == labels[None, :]
    pos[diag, diag] = False
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    skipped = np.flatnonzero(~valid)
    safe_npos = np.maximum(n_pos, 1)
    pos_mean = (pos * S).sum(axis=1) / safe_npos
    per_anchor = np.where(valid, lse - pos_mean, 0.0)
    if reduction == "sum":
        w = valid.astype(float)
    elif reduction == "mean":
        w = valid / max(int(valid.sum()), 1)
    elif reduction == "none":
        w = None
    else:
        raise ConfigError(f"unknown reduction {reduction!r}")
    if w is None:
        return per_anchor, None, skipped
    loss = float(np.sum(w * per_anchor))
    probs = E / denom
    G = w[:, None] * (probs - pos / safe_npos[:, None])
    grad = (G + G.T) @ z / eta
    return loss, grad, skipped


def segment_contrastive_loss(z, segment_length: int, eta: float):
    """Contrastive loss for consecutive blocks of ``segment_length`` rows.

    Every other pair in the anchor's own segment is a positive; the result is
    averaged over anchors.
    """
    n = z.shape[0]
    if segment_length < 2:
        raise SamplingError("segments must contain at least two state-action pairs")
    if n % segment_length:
        raise ConfigError("embedding count is not a multiple of the segment length")
    labels = np.repeat(np.arange(n // segment_length), segment_length)
    loss, grad, _ = supcon_loss(z, labels, eta, reduction="mean")
    return loss, grad


def p_non(c_n, c_u):
    """Bradley-Terry probability that the first trajectory is the costlier one."""
    return sigmoid(np.asarray(c_n, dtype=float) - np.asarray(c_u, dtype=float))


def preference_loss(c_n, c_u):
    """Mean ``-log p_non`` over pairs with gradients wrt both cost vectors."""
    c_n = np.atleast_1d(np.asarray(c_n, dtype=float))
    c_u = np.atleast_1d(np.asarray(c_u, dtype=float))
    delta = c_n - c_u
    loss = float(np.mean(np.logaddexp(0.0, -delta)))
    g = -sigmoid(-delta) / delta.size
    return loss, g, -g


def discount_weights(H: int, gamma: float) -> np.ndarray:
    return gamma ** np.arange(H, dtype=float)


class CostModel:
    def __init__(
        self,
        obs_dim: int,
        action_space: ActionSpace,
        hidden=(256, 256),
        embed_dim: int = 128,
        eta: float = 0.1,
        activation: str = "tanh",
        rng: np.random.Generator | None = None,
    ):
        if eta <= 0:
            raise ConfigError("temperature must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.action_space = action_space
        self.obs_dim = obs_dim
        self.eta = float(eta)
        self.encoder = Mlp([obs_dim + action_space.feature_dim, *hidden, embed_dim], activation, "unit_normalize", rng=rng)
        self.head = Mlp([embed_dim, 1], activation, "sigmoid", rng=rng)

    @classmethod
    def from_nets(cls, encoder: Mlp, head: Mlp, action_space: ActionSpace, eta: float = 0.1) -> "CostModel":
        """Wrap already-trained networks, e.g. loaded from a checkpoint."""
        model = cls.__new__(cls)
        model.action_space = action_space
        model.obs_dim = encoder.layer_sizes[0] - action_space.feature_dim
        model.eta = float(eta)
        model.encoder, model.head = encoder, head
        return model

    @property
    def nets(self) -> list[Mlp]:
        return [self.encoder, self.head]

    def inputs(self, states, actions) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        return np.concatenate([states, self.action_space.encode(actions)], axis=1)

    def embed(self, states, actions) -> np.ndarray:
        return self.encoder(self.inputs(states, actions))

    def per_step(self, states, actions) -> np.ndarray:
        return self.head(self.embed(states, actions))[:, 0]

    __call__ = per_step

    def trajectory_cost(self, states, actions, gamma: float) -> float:
        """Discounted predicted cost; ``states`` may include the trailing ``s_T``."""
        actions = np.asarray(actions)
        c = self.per_step(np.asarray(states)[: len(actions)], actions)
        return float(np.sum(discount_weights(len(c), gamma) * c))


@dataclass
class CostLosses:
    preference: float
    contrastive: float
    grads: list[np.ndarray]  # encoder, head

    @property
    def total(self) -> float:
        return self.preference + self.contrastive


def cost_losses(
    model: CostModel,
    batch: PartialTrajectoryBatch,
    gamma: float,
    partners: np.ndarray,
    use_contrastive: bool = True,
    use_preference: bool = True,
) -> CostLosses:
    """Joint loss ``L_pref + L_cont`` and its parameter gradients.

    ``partners[k]`` is the batch index of the union segment paired with the
    k-th non-preferred segment (in batch order).
    """
    n, H = batch.actions.shape[:2]
    states = batch.states[:, :H].reshape(n * H, -1)
    actions = batch.actions.reshape((n * H,) + batch.actions.shape[2:])
    z, enc_cache = model.encoder.forward(model.inputs(states, actions), return_cache=True)
    c, head_cache = model.head.forward(z, return_cache=True)
    dz = np.zeros_like(z)
    dc = np.zeros_like(c)
    l_pref = l_cont = 0.0
    if use_preference:
        w = discount_weights(H, gamma)
        seg_cost = c[:, 0].reshape(n, H) @ w
        nonpref = np.flatnonzero(batch.labels == 1)
        if nonpref.size == 0 or np.any(batch.labels[partners] != 0):
            raise SamplingError("preference pairs need non-preferred segments matched with union segments")
        l_pref, g_n, g_u = preference_loss(seg_cost[nonpref], seg_cost[partners])
        g_seg = np.zeros(n)
        np.add.at(g_seg, nonpref, g_n)
        np.add.at(g_seg, partners, g_u)
        dc = (g_seg[:, None] * w[None, :]).reshape(n * H, 1)
    head_grad, dz_pref = model.head.backward(head_cache, dc)
    dz += dz_pref
    if use_contrastive:
        l_cont, dz_cont = segment_contrastive_loss(z, H, model.eta)
        dz += dz_cont
    enc_grad, _ = model.encoder.backward(enc_cache, dz)
    return CostLosses(l_pref, l_cont, [enc_grad, head_grad])


def joint_cost_step(
    model: CostModel,
    optimizer: Adam,
    batch: PartialTrajectoryBatch,
    gamma: float,
    rng: np.random.Generator,
    use_contrastive: bool = True,
) -> tuple[float, float]:
    """One optimiser step on ``L_pref + L_cont``; returns both terms."""
    union = np.flatnonzero(batch.labels == 0)
    nonpref = np.flatnonzero(batch.labels == 1)
    if union.size == 0 or nonpref.size == 0:
        raise SamplingError("cost batch must contain union and non-preferred segments")
    partners = union[rng.integers(0, union.size, size=nonpref.size)]
    out = cost_losses(model, batch, gamma, partners, use_contrastive)
    optimizer.step(out.grads)
    return out.preference, out.contrastive


def train_cost_model(d_u, d_n, cfg, seed: int = 0, steps: int | None = None) -> tuple[CostModel, list]:
    """Cost learning alone, with the same initialisation and batch streams as the full learner."""
    from .datakit import as_learner_dataset, sample_partial_batch
    from .diffkit import make_rng

    d_u, d_n = as_learner_dataset(d_u), as_learner_dataset(d_n)
    model = CostModel(d_u.obs_dim, d_u.action_space, cfg.cost_hidden, cfg.embed_dim, cfg.eta, cfg.activation,
                      make_rng(seed, "cost_init"))
    opt = Adam(model.nets, cfg.lr_cost, cfg.weight_decay, cfg.max_grad_norm)
    rng_seg, rng_pair = make_rng(seed, "cost_batch"), make_rng(seed, "cost_pairs")
    history = []
    for _ in range(cfg.steps if steps is None else steps):
        batch = sample_partial_batch(d_u, d_n, cfg.segments_per_source, cfg.segments_per_source,
                                     cfg.segment_length, rng_seg)
        history.append(joint_cost_step(model, opt, batch, cfg.gamma, rng_pair, cfg.use_contrastive))
    return model, history
