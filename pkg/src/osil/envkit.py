"""Tabular CMDPs, the hazard gridworld, scripted behaviour policies and exact DP.

A ``TabularCmdp`` is the ground truth everything is evaluated against.  The
gridworld compiles into one, attaching per-state observation features that
the function approximators consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

GRID_ACTIONS = ("up", "down", "left", "right")
_MOVES = {0: (0, 1), 1: (0, -1), 2: (-1, 0), 3: (1, 0)}


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int = 0
    dim: int = 0

    def __post_init__(self):
        if self.kind == "discrete" and self.n < 1:
            raise ConfigError("discrete action space needs n >= 1")
        if self.kind == "continuous" and self.dim < 1:
            raise ConfigError("continuous action space needs dim >= 1")
        if self.kind not in ("discrete", "continuous"):
            raise ConfigError(f"unknown action space kind {self.kind!r}")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def feature_dim(self) -> int:
        return self.n if self.discrete else self.dim

    def encode(self, actions) -> np.ndarray:
        """Network-facing encoding: one-hot for discrete, raw values otherwise."""
        if self.discrete:
            a = np.asarray(actions, dtype=int)
            return np.eye(self.n)[a]
        a = np.asarray(actions, dtype=float)
        return a.reshape(a.shape[0], self.dim) if a.ndim == 1 and self.dim == 1 else a

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "dim": self.dim}

    @classmethod
    def from_dict(cls, d) -> "ActionSpace":
        return cls(d["kind"], int(d.get("n", 0)), int(d.get("dim", 0)))


@dataclass(eq=False)
class TabularCmdp:
    transition: np.ndarray  # [S, A, S']
    reward: np.ndarray  # [S, A]
    cost: np.ndarray  # [S, A]
    initial_dist: np.ndarray  # [S]
    gamma: float = 0.99
    horizon: int = 30
    cost_budget: float = 0.0
    state_features: np.ndarray | None = None  # [S, obs_dim]
    absorbing: np.ndarray | None = None  # [S] bool

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S) or self.cost.shape != (S, A) or self.initial_dist.shape != (S,):
            raise ConfigError("inconsistent CMDP tensor shapes")
        if np.any(np.abs(self.transition.sum(axis=2) - 1.0) > 1e-9) or np.any(self.transition < 0):
            raise ConfigError("transition rows must be distributions")
        if abs(self.initial_dist.sum() - 1.0) > 1e-9 or np.any(self.initial_dist < 0):
            raise ConfigError("initial distribution must sum to 1")
        if np.any(self.cost < 0):
            raise ConfigError("costs must be nonnegative")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError("gamma must lie in (0, 1]")
        if self.horizon < 1 or self.cost_budget < 0:
            raise ConfigError("horizon must be >= 1 and budget >= 0")
        if self.state_features is None:
            self.state_features = np.eye(S)
        self.state_features = np.asarray(self.state_features, dtype=float)
        if self.absorbing is None:
            self.absorbing = np.zeros(S, dtype=bool)
        self.absorbing = np.asarray(self.absorbing, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace("discrete", n=self.n_actions)

    @property
    def obs_dim(self) -> int:
        return self.state_features.shape[1]

    def feature_lookup(self) -> dict[bytes, int]:
        return {self.state_features[s].tobytes(): s for s in range(self.n_states)}


@dataclass(eq=False)
class Trajectory:
    """states has ``T+1`` rows; actions, hidden channels and terminals have ``T``.

    ``terminals[t]`` marks that ``states[t+1]`` is absorbing.
    """

    states: np.ndarray
    actions: np.ndarray
    hidden_rewards: np.ndarray
    hidden_costs: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions)
        self.hidden_rewards = np.asarray(self.hidden_rewards, dtype=float)
        self.hidden_costs = np.asarray(self.hidden_costs, dtype=float)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        T = len(self.actions)
        if self.states.shape[0] != T + 1 or len(self.hidden_rewards) != T or len(self.hidden_costs) != T:
            raise ConfigError("trajectory needs T+1 states and T actions/rewards/costs")
        if len(self.terminals) != T:
            raise ConfigError("terminal flags must have one entry per step")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.hidden_rewards.sum())

    @property
    def total_cost(self) -> float:
        return float(self.hidden_costs.sum())

    def learner_view(self) -> "LearnerTrajectory":
        return LearnerTrajectory(self.states, self.actions, self.terminals)


@dataclass(frozen=True, eq=False)
class LearnerTrajectory:
    """What learners are allowed to see: no reward or cost channel exists here."""

    states: np.ndarray
    actions: np.ndarray
    terminals: np.ndarray

    @property
    def length(self) -> int:
        return len(self.actions)


# ---------------------------------------------------------------------------
# gridworld


@dataclass
class GridHazardWorld:
    width: int = 5
    height: int = 5
    hazard_cells: frozenset = frozenset()
    goal_cells: frozenset = frozenset()
    start_cells: frozenset | None = None  # None: every free cell
    slip_prob: float = 0.05
    observation_mode: str = "coordinate_features"
    horizon: int = 30
    gamma: float = 0.99
    cost_budget: float = 0.1
    goal_reward: float = 1.0
    step_penalty: float = 0.02

    def __post_init__(self):
        self.hazard_cells = frozenset(tuple(c) for c in self.hazard_cells)
        self.goal_cells = frozenset(tuple(c) for c in self.goal_cells)
        if self.start_cells is not None:
            self.start_cells = frozenset(tuple(c) for c in self.start_cells)
        cells = {(x, y) for x in range(self.width) for y in range(self.height)}
        if not self.hazard_cells <= cells or not self.goal_cells <= cells:
            raise ConfigError("hazard and goal cells must lie on the grid")
        if self.hazard_cells & self.goal_cells:
            raise ConfigError("a cell cannot be both hazard and goal")
        if not self.goal_cells:
            raise ConfigError("at least one goal cell is required")
        if not (0.0 <= self.slip_prob < 1.0):
            raise ConfigError("slip_prob must lie in [0, 1)")
        if self.observation_mode not in ("one_hot_state", "coordinate_features"):
            raise ConfigError(f"unknown observation mode {self.observation_mode!r}")
        if self.start_cells is not None and not self.start_cells <= cells:
            raise ConfigError("start cells must lie on the grid")

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def state_index(self, x: int, y: int) -> int:
        return y * self.width + x

    def cell(self, s: int) -> tuple[int, int]:
        return s % self.width, s // self.width

    def next_cell(self, x, y, a):
        dx, dy = _MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < self.width and 0 <= ny < self.height:
            return nx, ny
        return x, y

    def starts(self) -> list[tuple[int, int]]:
        if self.start_cells is not None:
            return sorted(self.start_cells)
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in self.hazard_cells and (x, y) not in self.goal_cells
        ]

    def features(self) -> np.ndarray:
        S = self.n_states
        if self.observation_mode == "one_hot_state":
            return np.eye(S)
        feats = np.zeros((S, 2 + len(GRID_ACTIONS)))
        for s in range(S):
            x, y = self.cell(s)
            feats[s, 0] = x / self.width
            feats[s, 1] = y / self.height
            for a in range(len(GRID_ACTIONS)):
                nxt = self.next_cell(x, y, a)
                feats[s, 2 + a] = float(nxt != (x, y) and nxt in self.hazard_cells)
        return feats

    def compile(self) -> TabularCmdp:
        S, A = self.n_states, len(GRID_ACTIONS)
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        C = np.zeros((S, A))
        absorbing = np.zeros(S, dtype=bool)
        for s in range(S):
            x, y = self.cell(s)
            if (x, y) in self.goal_cells:
                P[s, :, s] = 1.0
                absorbing[s] = True
                continue
            for a in range(A):
                for b in range(A):
                    p = (1.0 - self.slip_prob) * (a == b) + self.slip_prob / A
                    if p > 0:
                        P[s, a, self.state_index(*self.next_cell(x, y, b))] += p
                goal_mass = sum(P[s, a, self.state_index(*g)] for g in self.goal_cells)
                R[s, a] = -self.step_penalty + self.goal_reward * goal_mass
                C[s, a] = 1.0 if (x, y) in self.hazard_cells else 0.0
        rho = np.zeros(S)
        starts = self.starts()
        for c in starts:
            rho[self.state_index(*c)] = 1.0 / len(starts)
        return TabularCmdp(P, R, C, rho, self.gamma, self.horizon, self.cost_budget, self.features(), absorbing)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "hazards": sorted([list(c) for c in self.hazard_cells]),
            "goals": sorted([list(c) for c in self.goal_cells]),
            "starts": None if self.start_cells is None else sorted([list(c) for c in self.start_cells]),
            "slip_prob": self.slip_prob,
            "observation_mode": self.observation_mode,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "cost_budget": self.cost_budget,
            "goal_reward": self.goal_reward,
            "step_penalty": self.step_penalty,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridHazardWorld":
        known = {
            "width", "height", "hazards", "goals", "starts", "slip_prob", "observation_mode",
            "horizon", "gamma", "cost_budget", "goal_reward", "step_penalty",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown environment keys: {sorted(unknown)}")
        starts = d.get("starts")
        return cls(
            width=int(d.get("width", 5)),
            height=int(d.get("height", 5)),
            hazard_cells=frozenset(tuple(c) for c in d.get("hazards", [])),
            goal_cells=frozenset(tuple(c) for c in d.get("goals", [])),
            start_cells=None if starts is None else frozenset(tuple(c) for c in starts),
            slip_prob=float(d.get("slip_prob", 0.05)),
            observation_mode=d.get("observation_mode", "coordinate_features"),
            horizon=int(d.get("horizon", 30)),
            gamma=float(d.get("gamma", 0.99)),
            cost_budget=float(d.get("cost_budget", 0.1)),
            goal_reward=float(d.get("goal_reward", 1.0)),
            step_penalty=float(d.get("step_penalty", 0.02)),
        )


def hazard_grid_5x5(**overrides) -> GridHazardWorld:
    """The default desk task: a 3x3 hazard block in the middle, goal in the top-right corner.

    Episodes start on the bottom row or left column.  From each start there
    is a hazard-free shortest path along the border and an equally short one
    through the block, so high-return behaviour spans the whole cost range.
    """
    params = dict(
        width=5,
        height=5,
        hazard_cells=frozenset((x, y) for x in (1, 2, 3) for y in (1, 2, 3)),
        goal_cells=frozenset({(4, 4)}),
        start_cells=frozenset({(x, 0) for x in range(4)} | {(0, y) for y in range(4)}),
    )
    params.update(overrides)
    return GridHazardWorld(**params)


def load_env_config(path) -> GridHazardWorld:
    from .config import read_kv_file

    return GridHazardWorld.from_dict(read_kv_file(path))


# ---------------------------------------------------------------------------
# policies and rollouts


def as_tabular(policy, cmdp: TabularCmdp) -> np.ndarray:
    """Accept a ``[S, A]`` array or anything exposing ``action_probabilities``."""
    if isinstance(policy, np.ndarray):
        pi = np.asarray(policy, dtype=float)
    else:
        pi = np.asarray(policy.action_probabilities(cmdp.state_features), dtype=float)
    if pi.shape != (cmdp.n_states, cmdp.n_actions):
        raise ConfigError(f"tabular policy must have shape {(cmdp.n_states, cmdp.n_actions)}")
    if np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9) or np.any(pi < 0):
        raise ConfigError("tabular policy rows must be distributions")
    return pi


def uniform_policy(cmdp: TabularCmdp) -> np.ndarray:
    return np.full((cmdp.n_states, cmdp.n_actions), 1.0 / cmdp.n_actions)


def _shortest_path_policy(world: GridHazardWorld, step_weight) -> np.ndarray:
    """Greedy policy of a deterministic shortest-path problem; ties are split evenly."""
    S, A = world.n_states, len(GRID_ACTIONS)
    dist = np.full(S, np.inf)
    for g in world.goal_cells:
        dist[world.state_index(*g)] = 0.0
    for _ in range(4 * S):
        changed = False
        for s in range(S):
            x, y = world.cell(s)
            if (x, y) in world.goal_cells:
                continue
            best = min(dist[world.state_index(*world.next_cell(x, y, a))] for a in range(A))
            val = step_weight(x, y) + best
            if val < dist[s] - 1e-12:
                dist[s] = val
                changed = True
        if not changed:
            break
    pi = np.zeros((S, A))
    for s in range(S):
        x, y = world.cell(s)
        if (x, y) in world.goal_cells:
            pi[s] = 1.0 / A
            continue
        vals = np.array([dist[world.state_index(*world.next_cell(x, y, a))] for a in range(A)])
        moving = np.array([world.next_cell(x, y, a) != (x, y) for a in range(A)])
        vals[~moving] = np.inf
        best = vals == vals.min()
        pi[s] = best / best.sum()
    return pi


def scripted_policy(world: GridHazardWorld, kind: str, kappa: float = 0.5) -> np.ndarray:
    """Tabular behaviour policy: ``safe``, ``risky``, ``mixed`` (kappa blend) or ``random``."""
    if kind == "safe":
        return _shortest_path_policy(world, lambda x, y: 1.0 + 1000.0 * ((x, y) in world.hazard_cells))
    if kind == "risky":
        # shortest path that prefers hazard cells among equal-length routes
        return _shortest_path_policy(world, lambda x, y: 1.0 - 1e-3 * ((x, y) in world.hazard_cells))
    if kind == "mixed":
        if not 0.0 <= kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        return kappa * scripted_policy(world, "risky") + (1.0 - kappa) * scripted_policy(world, "safe")
    if kind == "random":
        return np.full((world.n_states, len(GRID_ACTIONS)), 1.0 / len(GRID_ACTIONS))
    raise ConfigError(f"unknown scripted policy {kind!r}")


def rollout(cmdp: TabularCmdp, policy, seed, horizon: int | None = None) -> Trajectory:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    T = cmdp.horizon if horizon is None else int(horizon)
    if T < 1:
        raise ConfigError("horizon must be >= 1")
    pi = as_tabular(policy, cmdp)
    S, A = cmdp.n_states, cmdp.n_actions
    s = int(rng.choice(S, p=cmdp.initial_dist))
    states = np.empty(T + 1, dtype=int)
    actions = np.empty(T, dtype=int)
    states[0] = s
    for t in range(T):
        a = int(rng.choice(A, p=pi[s]))
        actions[t] = a
        s = int(rng.choice(S, p=cmdp.transition[s, a]))
        states[t + 1] = s
    return Trajectory(
        cmdp.state_features[states],
        actions,
        cmdp.reward[states[:-1], actions],
        cmdp.cost[states[:-1], actions],
        cmdp.absorbing[states[1:]],
    )


def rollout_batch(cmdp: TabularCmdp, policy, n: int, rng: np.random.Generator, horizon=None):
    """Vectorised rollouts returning raw state/action index arrays.

    Returns ``(states [n, T+1], actions [n, T])``; used where thousands of
    episodes are needed (pools, evaluation).
    """
    T = cmdp.horizon if horizon is None else int(horizon)
    pi = as_tabular(policy, cmdp)
    S, A = cmdp.n_states, cmdp.n_actions
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(cmdp.transition, axis=2)
    states = np.empty((n, T + 1), dtype=int)
    actions = np.empty((n, T), dtype=int)
    states[:, 0] = np.minimum(np.searchsorted(np.cumsum(cmdp.initial_dist), rng.random(n), side="right"), S - 1)
    for t in range(T):
        s = states[:, t]
        a = np.minimum((rng.random(n)[:, None] >= pi_cdf[s]).sum(axis=1), A - 1)
        actions[:, t] = a
        states[:, t + 1] = np.minimum((rng.random(n)[:, None] >= p_cdf[s, a]).sum(axis=1), S - 1)
    return states, actions


def trajectories_from_indices(cmdp: TabularCmdp, states, actions) -> list[Trajectory]:
    return [
        Trajectory(
            cmdp.state_features[st],
            ac,
            cmdp.reward[st[:-1], ac],
            cmdp.cost[st[:-1], ac],
            cmdp.absorbing[st[1:]],
        )
        for st, ac in zip(states, actions)
    ]


# ---------------------------------------------------------------------------
# exact dynamic programming


@dataclass
class PolicyEvaluation:
    j_reward: float
    j_cost: float
    v_reward: np.ndarray
    q_reward: np.ndarray
    v_cost: np.ndarray
    q_cost: np.ndarray


def exact_policy_evaluation(cmdp: TabularCmdp, policy, mode: str = "finite", gamma: float | None = None) -> PolicyEvaluation:
    """Exact values of a stationary policy.

    ``mode="finite"`` runs the T-step backward recursion (values at t=0);
    ``mode="discounted"`` solves the infinite-horizon linear system.  ``gamma``
    overrides the CMDP discount, e.g. ``gamma=1.0`` for undiscounted episodic
    totals in finite mode.
    """
    pi = as_tabular(policy, cmdp)
    g = cmdp.gamma if gamma is None else float(gamma)
    P = cmdp.transition
    if mode == "finite":
        vr = np.zeros(cmdp.n_states)
        vc = np.zeros(cmdp.n_states)
        qr = qc = None
        for _ in range(cmdp.horizon):
            qr = cmdp.reward + g * P @ vr
            qc = cmdp.cost + g * P @ vc
            vr = np.sum(pi * qr, axis=1)
            vc = np.sum(pi * qc, axis=1)
    elif mode == "discounted":
        if not g < 1.0:
            raise ConfigError("discounted evaluation needs gamma < 1")
        P_pi = np.einsum("sa,sat->st", pi, P)
        M = np.eye(cmdp.n_states) - g * P_pi
        vr = np.linalg.solve(M, np.sum(pi * cmdp.reward, axis=1))
        vc = np.linalg.solve(M, np.sum(pi * cmdp.cost, axis=1))
        qr = cmdp.reward + g * P @ vr
        qc = cmdp.cost + g * P @ vc
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    rho = cmdp.initial_dist
    return PolicyEvaluation(float(rho @ vr), float(rho @ vc), vr, qr, vc, qc)


def _discounted_q(P, r, pi, gamma, allowed=None):
    S = r.shape[0]
    P_pi = np.einsum("sa,sat->st", pi, P)
    v = np.linalg.solve(np.eye(S) - gamma * P_pi, np.sum(pi * r, axis=1))
    return r + gamma * P @ v


def _policy_iteration(P, r, gamma, allowed, maximize=True, max_iter=1000):
    S, A = r.shape
    sign = 1.0 if maximize else -1.0
    act = np.array([np.flatnonzero(allowed[s])[0] for s in range(S)])
    for _ in range(max_iter):
        q = sign * _discounted_q(P, r, np.eye(A)[act], gamma)
        q = np.where(allowed, q, -np.inf)
        best = q.argmax(axis=1)
        improve = q[np.arange(S), best] > q[np.arange(S), act] + 1e-10
        if not improve.any():
            return act, sign * q
        act = np.where(improve, best, act)
    return act, sign * q


def greedy_policy(cmdp: TabularCmdp, lam: float) -> np.ndarray:
    """Deterministic optimal policy for ``reward - lam * cost`` (discounted).

    Among actions that are optimal for the penalised reward, the one with the
    lowest cost-to-go is chosen, which keeps J_c monotone in ``lam``.
    """
    P, g = cmdp.transition, cmdp.gamma
    S, A = cmdp.n_states, cmdp.n_actions
    r = cmdp.reward - lam * cmdp.cost
    everything = np.ones((S, A), dtype=bool)
    _, q = _policy_iteration(P, r, g, everything, maximize=True)
    scale = max(1.0, float(np.max(np.abs(q))))
    optimal = q >= q.max(axis=1, keepdims=True) - 1e-9 * scale
    act, _ = _policy_iteration(P, cmdp.cost, g, optimal, maximize=False)
    return np.eye(A)[act]


@dataclass
class ReferenceSolution:
    policy: np.ndarray
    j_reward: float
    j_cost: float
    lam: float
    feasible: bool


def solve_constrained_reference(
    cmdp: TabularCmdp, lam_max: float = 1e4, max_bisections: int = 60, rel_tol: float = 1e-3
) -> ReferenceSolution:
    """Lagrangian bisection over the cost penalty with exact (discounted) DP."""
    b = cmdp.cost_budget

    def solve(lam):
        pi = greedy_policy(cmdp, lam)
        ev = exact_policy_evaluation(cmdp, pi, mode="discounted")
        return pi, ev.j_reward, ev.j_cost

    pi0, jr0, jc0 = solve(0.0)
    if jc0 <= b * (1 + rel_tol) + 1e-12:
        return ReferenceSolution(pi0, jr0, jc0, 0.0, True)
    pi_hi, jr_hi, jc_hi = solve(lam_max)
    if jc_hi > b * (1 + rel_tol) + 1e-12:
        return ReferenceSolution(pi_hi, jr_hi, jc_hi, lam_max, False)
    best = (pi_hi, jr_hi, jc_hi, lam_max)
    lo, hi = 0.0, lam_max
    for _ in range(max_bisections):
        mid = 0.5 * (lo + hi)
        pi, jr, jc = solve(mid)
        if jc <= b * (1 + rel_tol) + 1e-12:
            hi = mid
            if jr > best[1]:
                best = (pi, jr, jc, mid)
            if jc >= b * (1 - rel_tol):
                break
        else:
            lo = mid
        if hi - lo < 1e-9 * max(1.0, hi):
            break
    pi, jr, jc, lam = best
    return ReferenceSolution(pi, jr, jc, lam, True)


def random_cmdp(rng: np.random.Generator, n_states=6, n_actions=3, gamma=0.9, horizon=20) -> TabularCmdp:
    """Dense random CMDP used by the property tests and the bound verifier."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.normal(size=(n_states, n_actions))
    C = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularCmdp(P, R, C, rho, gamma, horizon, 1.0)
