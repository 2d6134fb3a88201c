"""Union / non-preferred datasets, JSON-lines storage and minibatch samplers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envkit import (
    ActionSpace,
    GridHazardWorld,
    LearnerTrajectory,
    Trajectory,
    rollout_batch,
    scripted_policy,
    trajectories_from_indices,
)
from .errors import ConfigError, DatasetError, SamplingError

FORMAT_NAME = "osil-trajectories"
FORMAT_VERSION = 1
LABELS = ("union", "non_preferred")


@dataclass(eq=False)
class TrajectoryDataset:
    trajectories: list[Trajectory]
    label: str
    action_space: ActionSpace
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetError(f"unknown dataset label {self.label!r}")
        if not self.trajectories:
            raise DatasetError(f"{self.label} dataset is empty")
        dims = {t.states.shape[1] for t in self.trajectories}
        if len(dims) != 1:
            raise DatasetError(f"trajectories disagree on observation width: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    def learner_view(self) -> "LearnerDataset":
        return LearnerDataset([t.learner_view() for t in self.trajectories], self.label, self.action_space)

    def stats(self) -> dict:
        r = np.array([t.total_reward for t in self.trajectories])
        c = np.array([t.total_cost for t in self.trajectories])
        return {
            "label": self.label,
            "n_trajectories": len(self),
            "mean_return": float(r.mean()),
            "mean_cost": float(c.mean()),
            "return_quantiles": {str(q): float(np.quantile(r, q)) for q in (0.1, 0.5, 0.9)},
            "cost_quantiles": {str(q): float(np.quantile(c, q)) for q in (0.1, 0.5, 0.9)},
        }


@dataclass(eq=False)
class LearnerDataset:
    """Stripped dataset handed to every learner."""

    trajectories: list[LearnerTrajectory]
    label: str
    action_space: ActionSpace

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    def min_length(self) -> int:
        if "_min_length" not in self.__dict__:
            self.__dict__["_min_length"] = min(t.length for t in self.trajectories)
        return self.__dict__["_min_length"]

    def _stack(self):
        cache = self.__dict__.get("_stacked")
        if cache is None:
            lengths = {t.length for t in self.trajectories}
            if len(lengths) == 1:
                cache = (
                    np.stack([t.states for t in self.trajectories]),
                    np.stack([t.actions for t in self.trajectories]),
                    np.stack([t.terminals for t in self.trajectories]),
                )
            else:
                cache = False
            self.__dict__["_stacked"] = cache
        return cache

    def transitions(self) -> "TransitionTable":
        cache = self.__dict__.get("_transitions")
        if cache is None:
            s, a, s2, d = [], [], [], []
            for t in self.trajectories:
                s.append(t.states[:-1])
                s2.append(t.states[1:])
                a.append(t.actions)
                d.append(t.terminals)
            cache = TransitionTable(np.concatenate(s), np.concatenate(a), np.concatenate(s2), np.concatenate(d))
            self.__dict__["_transitions"] = cache
        return cache

    def initial_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Timestep-0 ``(s0, a0)`` of every trajectory."""
        return (
            np.stack([t.states[0] for t in self.trajectories]),
            np.stack([t.actions[0] for t in self.trajectories]),
        )


def as_learner_dataset(ds) -> LearnerDataset:
    if isinstance(ds, LearnerDataset):
        return ds
    if isinstance(ds, TrajectoryDataset):
        return ds.learner_view()
    raise TypeError(f"expected a dataset, got {type(ds).__name__}")


@dataclass
class TransitionTable:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def sample(self, n: int, rng: np.random.Generator) -> "TransitionTable":
        idx = rng.integers(0, len(self), size=n)
        return TransitionTable(self.states[idx], self.actions[idx], self.next_states[idx], self.terminals[idx])


@dataclass
class PartialTrajectoryBatch:
    """Segments of length H stacked as arrays; label 1 marks non-preferred."""

    states: np.ndarray  # [n, H+1, obs]
    actions: np.ndarray  # [n, H] or [n, H, dim]
    terminals: np.ndarray  # [n, H]
    labels: np.ndarray  # [n] 0 union, 1 non-preferred
    trajectory_ids: np.ndarray
    starts: np.ndarray

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def source_labels(self) -> list[str]:
        return [LABELS[int(l)] for l in self.labels]

    def select(self, mask) -> "PartialTrajectoryBatch":
        return PartialTrajectoryBatch(
            self.states[mask], self.actions[mask], self.terminals[mask],
            self.labels[mask], self.trajectory_ids[mask], self.starts[mask],
        )


# ---------------------------------------------------------------------------
# construction


def generate_pool(
    world: GridHazardWorld,
    n: int,
    rng: np.random.Generator,
    random_fraction: float = 0.5,
) -> list[Trajectory]:
    """Behaviour pool: mixed-kappa scripted rollouts plus a share of uniform-random ones.

    kappa ~ U[0, 1] per trajectory spreads the pool over the whole cost
    spectrum; the random share supplies the low-return tail that the
    return filter removes.
    """
    cmdp = world.compile()
    safe = scripted_policy(world, "safe")
    risky = scripted_policy(world, "risky")
    uniform = scripted_policy(world, "random")
    pool = []
    for _ in range(n):
        if rng.random() < random_fraction:
            pi = uniform
        else:
            k = rng.random()
            pi = k * risky + (1.0 - k) * safe
        st, ac = rollout_batch(cmdp, pi, 1, rng)
        pool.extend(trajectories_from_indices(cmdp, st, ac))
    return pool


def build_datasets(
    pool: list[Trajectory],
    action_space: ActionSpace,
    union_return_quantile: float = 0.5,
    nonpref_cost_quantile: float = 0.7,
    n_nonpref: int = 50,
    seed=0,
    union_cap: int | None = None,
    remove_nonpref_from_union: bool = False,
) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Return ``(D_U, D_N)`` from a behaviour pool.

    D_U keeps every trajectory whose return is strictly above the pool's
    return quantile.  D_N samples ``n_nonpref`` of those whose cost is at or
    above the ``nonpref_cost_quantile`` of D_U's costs.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not pool:
        raise DatasetError("empty trajectory pool")
    returns = np.array([t.total_reward for t in pool])
    costs = np.array([t.total_cost for t in pool])
    r_thr = float(np.quantile(returns, union_return_quantile))
    union_idx = np.flatnonzero(returns > r_thr)
    if union_idx.size == 0:
        raise DatasetError(f"return filter kept 0 of {len(pool)} trajectories (threshold {r_thr:.4g})")
    c_thr = float(np.quantile(costs[union_idx], nonpref_cost_quantile))
    cand = union_idx[costs[union_idx] >= c_thr]
    if cand.size < n_nonpref:
        raise DatasetError(
            f"non-preferred filter kept {cand.size} trajectories, {n_nonpref} requested "
            f"(pool {len(pool)}, union {union_idx.size}, cost threshold {c_thr:.4g})"
        )
    nonpref_idx = np.sort(rng.choice(cand, size=n_nonpref, replace=False))
    if remove_nonpref_from_union:
        union_idx = np.setdiff1d(union_idx, nonpref_idx)
    if union_cap is not None and union_idx.size > union_cap:
        union_idx = np.sort(rng.choice(union_idx, size=union_cap, replace=False))
    prov = {
        "pool_size": len(pool),
        "return_threshold": r_thr,
        "cost_threshold": c_thr,
        "union_return_quantile": union_return_quantile,
        "nonpref_cost_quantile": nonpref_cost_quantile,
    }
    d_u = TrajectoryDataset([pool[i] for i in union_idx], "union", action_space,
                            dict(prov, pool_indices=union_idx.tolist()))
    d_n = TrajectoryDataset([pool[i] for i in nonpref_idx], "non_preferred", action_space,
                            dict(prov, pool_indices=nonpref_idx.tolist(), candidates=int(cand.size)))
    return d_u, d_n


def inject_label_noise(d_n: TrajectoryDataset, d_u: TrajectoryDataset, noise_fraction: float, seed=0) -> TrajectoryDataset:
    """Swap ``floor(noise_fraction * |D_N|)`` non-preferred trajectories for union draws."""
    if not 0.0 <= noise_fraction < 1.0:
        raise ConfigError("noise_fraction must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(math.floor(noise_fraction * len(d_n) + 1e-9))
    if k == 0:
        return d_n
    if k > len(d_u):
        raise DatasetError("not enough union trajectories to draw noise from")
    slots = np.sort(rng.choice(len(d_n), size=k, replace=False))
    draws = rng.choice(len(d_u), size=k, replace=False)
    trajs = list(d_n.trajectories)
    for slot, j in zip(slots, draws):
        trajs[slot] = d_u.trajectories[j]
    prov = dict(d_n.provenance, noise_fraction=noise_fraction,
                noisy_slots=slots.tolist(), union_sources=draws.tolist())
    return TrajectoryDataset(trajs, "non_preferred", d_n.action_space, prov)


# ---------------------------------------------------------------------------
# sampling


def sample_partial_batch(d_u, d_n, n_union_trajs: int, n_nonpref_trajs: int, H: int, seed) -> PartialTrajectoryBatch:
    """Uniform trajectories (with replacement) and uniform start indices."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if H < 2:
        raise SamplingError("segment length H must be >= 2")
    parts = []
    for ds, n, label in ((d_u, n_union_trajs, 0), (d_n, n_nonpref_trajs, 1)):
        if n == 0:
            continue
        ds = as_learner_dataset(ds)
        shortest = ds.min_length()
        if shortest < H:
            raise SamplingError(f"{ds.label} dataset has a trajectory of length {shortest} < H={H}")
        ids = rng.integers(0, len(ds), size=n)
        stacked = ds._stack()
        if stacked:
            S, A, D = stacked
            T = A.shape[1]
            starts = rng.integers(0, T - H + 1, size=n)
            steps = starts[:, None] + np.arange(H + 1)
            st = S[ids[:, None], steps]
            ac = A[ids[:, None], steps[:, :H]]
            te = D[ids[:, None], steps[:, :H]]
        else:
            starts = np.array([rng.integers(0, ds.trajectories[i].length - H + 1) for i in ids])
            st = np.stack([ds.trajectories[i].states[s:s + H + 1] for i, s in zip(ids, starts)])
            ac = np.stack([ds.trajectories[i].actions[s:s + H] for i, s in zip(ids, starts)])
            te = np.stack([ds.trajectories[i].terminals[s:s + H] for i, s in zip(ids, starts)])
        parts.append((st, ac, te, np.full(n, label), ids, starts))
    if not parts:
        raise SamplingError("batch would be empty")
    cols = list(zip(*parts))
    return PartialTrajectoryBatch(*(np.concatenate(c) for c in cols))


# ---------------------------------------------------------------------------
# storage


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_dataset(ds: TrajectoryDataset, path) -> str:
    """Write JSON lines (header + one trajectory per line); returns the sha256 of the file."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "label": ds.label,
        "obs_dim": ds.obs_dim,
        "action_space": ds.action_space.to_dict(),
        "n_trajectories": len(ds),
        "provenance": ds.provenance,
    }
    lines = [_dumps(header)]
    for i, t in enumerate(ds.trajectories):
        lines.append(_dumps({
            "id": i,
            "states": t.states.tolist(),
            "actions": t.actions.tolist(),
            "terminals": t.terminals.astype(int).tolist(),
            "hidden_rewards": t.hidden_rewards.tolist(),
            "hidden_costs": t.hidden_costs.tolist(),
        }))
    data = ("\n".join(lines) + "\n").encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read(path):
    text = Path(path).read_text()
    lines = [l for l in text.split("\n") if l.strip()]
    if not lines:
        raise DatasetError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: unreadable header") from e
    if header.get("format") != FORMAT_NAME:
        raise DatasetError(f"{path} is not a trajectory file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported version {header.get('version')}, expected {FORMAT_VERSION}")
    if len(lines) - 1 != header["n_trajectories"]:
        raise DatasetError(f"{path} is truncated: {len(lines) - 1} of {header['n_trajectories']} trajectories")
    try:
        rows = [json.loads(l) for l in lines[1:]]
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path} is truncated or corrupt") from e
    return header, rows


def deserialize_dataset(path) -> TrajectoryDataset:
    header, rows = _read(path)
    space = ActionSpace.from_dict(header["action_space"])
    dtype = int if space.discrete else float
    trajs = [
        Trajectory(
            np.asarray(r["states"], dtype=float).reshape(-1, header["obs_dim"]),
            np.asarray(r["actions"], dtype=dtype),
            r["hidden_rewards"],
            r["hidden_costs"],
            np.asarray(r["terminals"], dtype=bool),
        )
        for r in rows
    ]
    return TrajectoryDataset(trajs, header["label"], space, header["provenance"])


def load_learner_dataset(path) -> LearnerDataset:
    """Learner-facing loader; hidden channels are dropped on read."""
    header, rows = _read(path)
    space = ActionSpace.from_dict(header["action_space"])
    dtype = int if space.discrete else float
    trajs = [
        LearnerTrajectory(
            np.asarray(r["states"], dtype=float).reshape(-1, header["obs_dim"]),
            np.asarray(r["actions"], dtype=dtype),
            np.asarray(r["terminals"], dtype=bool),
        )
        for r in rows
    ]
    return LearnerDataset(trajs, header["label"], space)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
