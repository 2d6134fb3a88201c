"""Cost action-value critic fitted by TD regression with a Polyak target network."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .datakit import TransitionTable
from .diffkit import Adam, Mlp, polyak_update
from .envkit import ActionSpace, TabularCmdp
from .errors import ConfigError, NumericError

CostFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class CostCritic:
    """Scalar Q network on ``state ⊕ action`` features plus a trailing target copy.

    ``input_fn`` replaces the default feature map (e.g. a one-hot of the
    state-action index gives a tabular critic); ``input_dim`` must match it.
    """

    def __init__(
        self,
        obs_dim: int,
        action_space: ActionSpace,
        hidden=(256, 256),
        gamma: float = 0.99,
        zeta: float = 0.005,
        activation: str = "tanh",
        rng: np.random.Generator | None = None,
        input_fn: Callable | None = None,
        input_dim: int | None = None,
    ):
        if not 0.0 < zeta <= 1.0:
            raise ConfigError("zeta must lie in (0, 1]")
        self.action_space = action_space
        self.obs_dim = obs_dim
        self.gamma = float(gamma)
        self.zeta = float(zeta)
        self.input_fn = input_fn
        width = input_dim if input_fn is not None else obs_dim + action_space.feature_dim
        self.q_net = Mlp([width, *hidden, 1], activation, rng=rng if rng is not None else np.random.default_rng(0))
        self.q_target = self.q_net.copy()

    def inputs(self, states, actions) -> np.ndarray:
        if self.input_fn is not None:
            return self.input_fn(states, actions)
        return np.concatenate([np.asarray(states, dtype=float), self.action_space.encode(actions)], axis=1)

    def q(self, states, actions, target: bool = False) -> np.ndarray:
        net = self.q_target if target else self.q_net
        return net(self.inputs(states, actions))[:, 0]

    def q_all(self, states, target: bool = False) -> np.ndarray:
        """``[n, |A|]`` values for every discrete action."""
        if not self.action_space.discrete:
            raise ConfigError("q_all needs a discrete action space")
        states = np.asarray(states, dtype=float)
        n, A = states.shape[0], self.action_space.n
        rep = np.repeat(states, A, axis=0)
        acts = np.tile(np.arange(A), n)
        return self.q(rep, acts, target).reshape(n, A)

    def action_gradient(self, states, actions) -> tuple[np.ndarray, np.ndarray]:
        """Q and dQ/da for continuous actions (used by the pathwise policy term)."""
        x = self.inputs(states, actions)
        out, cache = self.q_net.forward(x, return_cache=True)
        _, gx = self.q_net.backward(cache, np.ones_like(out))
        return out[:, 0], gx[:, self.obs_dim:]

    def update_target(self) -> None:
        polyak_update(self.q_target.params, self.q_net.params, self.zeta)


def td_target(
    critic: CostCritic,
    cost_fn: CostFn,
    states,
    actions,
    next_states,
    terminals,
    policy,
    rng: np.random.Generator,
    mode: str = "sample",
) -> np.ndarray:
    """``c(s,a) + gamma (1 - terminal) Q_target(s', a')`` with ``a' ~ policy(s')``.

    ``mode="mean"`` uses the policy mean action (continuous) or the exact
    expectation over actions (discrete).  The result is a constant for all
    gradient purposes.
    """
    c = np.asarray(cost_fn(states, actions), dtype=float)
    if critic.gamma == 0.0:
        return c.copy()
    next_states = np.asarray(next_states, dtype=float)
    if mode == "sample":
        q_next = critic.q(next_states, policy.sample(next_states, rng), target=True)
    elif mode == "mean":
        if critic.action_space.discrete:
            q_next = np.sum(policy.action_probabilities(next_states) * critic.q_all(next_states, target=True), axis=1)
        else:
            q_next = critic.q(next_states, policy.mean_action(next_states), target=True)
    else:
        raise ConfigError(f"unknown target mode {mode!r}")
    mask = 1.0 - np.asarray(terminals, dtype=float)
    return c + critic.gamma * mask * q_next


def td_loss(critic: CostCritic, states, actions, y) -> tuple[float, np.ndarray]:
    """Mean squared residual and its gradient wrt the online parameters."""
    out, cache = critic.q_net.forward(critic.inputs(states, actions), return_cache=True)
    resid = out[:, 0] - y
    loss = float(np.mean(resid**2))
    grad, _ = critic.q_net.backward(cache, (2.0 / resid.size) * resid[:, None])
    return loss, grad


def critic_step(
    critic: CostCritic,
    optimizer: Adam,
    cost_fn: CostFn,
    batch: TransitionTable,
    policy,
    rng: np.random.Generator,
    mode: str = "sample",
) -> float:
    """One Adam step on the TD loss followed by the Polyak target update."""
    y = td_target(critic, cost_fn, batch.states, batch.actions, batch.next_states, batch.terminals, policy, rng, mode)

    def fail(cause):
        finite = np.isfinite(y)
        return NumericError(
            f"non-finite TD loss ({cause})",
            details={
                "batch_size": len(y),
                "non_finite_targets": int((~finite).sum()),
                "target_min": float(y[finite].min()) if finite.any() else None,
                "target_max": float(y[finite].max()) if finite.any() else None,
            },
        )

    if not np.all(np.isfinite(y)):
        raise fail("target")
    try:
        loss, grad = td_loss(critic, batch.states, batch.actions, y)
    except NumericError as exc:
        raise fail(exc) from exc
    if not np.isfinite(loss):
        raise fail("residual")
    optimizer.step([grad])
    critic.update_target()
    return loss


class GroundTruthCost:
    """Per-step hidden cost looked up from observation features.

    Used for the ablation that bypasses cost learning.  The lookup is built
    from the environment, so it is never handed to a learner by default.
    """

    def __init__(self, cmdp: TabularCmdp):
        self._lookup = cmdp.feature_lookup()
        self._cost = cmdp.cost

    def state_index(self, states) -> np.ndarray:
        states = np.ascontiguousarray(np.asarray(states, dtype=float))
        try:
            return np.array([self._lookup[row.tobytes()] for row in states], dtype=int)
        except KeyError as exc:
            raise ConfigError("observation does not belong to this environment") from exc

    def __call__(self, states, actions) -> np.ndarray:
        return self._cost[self.state_index(states), np.asarray(actions, dtype=int)]


def tabular_input_fn(n_states: int, n_actions: int, state_index: Callable) -> Callable:
    """One-hot ``(s, a)`` features, turning a linear critic into a lookup table."""

    def fn(states, actions):
        idx = state_index(states) * n_actions + np.asarray(actions, dtype=int)
        out = np.zeros((idx.size, n_states * n_actions))
        out[np.arange(idx.size), idx] = 1.0
        return out

    return fn
