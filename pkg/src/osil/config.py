"""Experiment configuration: key-value files, defaults and hashing.

File format, one entry per line::

    # comment
    include = defaults.cfg        # path relative to this file
    train.steps = 50000
    train.actor_hidden = [64, 64]
    env.slip_prob = 0.05

Values are parsed as JSON literals and fall back to bare strings.  Dotted
keys build nested sections.  Later lines override earlier ones, including
values pulled in by ``include``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_dotted(out: dict, key: str, value) -> None:
    parts = key.split(".")
    node = out
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"key {key!r} conflicts with scalar {p!r}")
        node = nxt
    node[parts[-1]] = value


def read_kv_file(path, _seen: tuple = ()) -> dict:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle at {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key == "include":
            inc = Path(_parse_value(value))
            merge_into(out, read_kv_file(inc if inc.is_absolute() else path.parent / inc, _seen + (path,)))
        else:
            _set_dotted(out, key, _parse_value(value))
    return out


def merge_into(base: dict, update: dict) -> dict:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            merge_into(base[k], v)
        else:
            base[k] = v
    return base


def write_kv_file(cfg: dict, path) -> None:
    lines = []

    def walk(prefix, d):
        for k in sorted(d):
            v = d[k]
            key = f"{prefix}{k}"
            if isinstance(v, dict) and v:
                walk(key + ".", v)
            else:
                lines.append(f"{key} = {json.dumps(v)}")

    walk("", cfg)
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class DataConfig:
    pool_size: int = 1000
    random_fraction: float = 0.5
    union_return_quantile: float = 0.5
    nonpref_cost_quantile: float = 0.7
    n_nonpref: int = 50
    union_cap: int | None = None
    noise_fraction: float = 0.0
    remove_nonpref_from_union: bool = False


@dataclass
class TrainConfig:
    """Hyperparameters for OSIL and the baselines (full-scale defaults)."""

    algo: str = "osil"
    steps: int = 1_000_000
    batch_size: int = 128
    gamma: float = 0.99
    lr_actor: float = 1e-5
    lr_cost: float = 1e-5
    lr_critic: float = 1e-5
    weight_decay: float = 0.01
    actor_hidden: list = field(default_factory=lambda: [256, 256])
    critic_hidden: list = field(default_factory=lambda: [256, 256])
    cost_hidden: list = field(default_factory=lambda: [256, 256])
    embed_dim: int = 128
    activation: str = "tanh"
    eta: float = 0.1
    alpha_bar: float = 0.005
    segment_length: int = 5
    segments_per_source: int = 64
    zeta: float = 0.005
    max_grad_norm: float | None = 10.0
    use_contrastive: bool = True
    ground_truth_cost: bool = False
    target_action: str = "sample"
    dwbc_eta: float = 0.5
    safedice_alpha: float = 0.1
    safedice_gp: float = 10.0
    pretrain_steps: int | None = None  # reward / discriminator / nu stages; None -> steps // 5
    eval_every: int = 0
    n_eval: int = 50


ALGOS = ("osil", "bc", "ppl", "dwbc", "safedice")


@dataclass
class ExperimentConfig:
    name: str = "hazard_grid"
    env: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    algos: list = field(default_factory=lambda: ["osil"])
    n_boot: int = 1000
    confidence: float = 0.95
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = _build(DataConfig, self.data, "data")
        if isinstance(self.train, dict):
            self.train = _build(TrainConfig, self.train, "train")
        self.validate()

    def validate(self) -> None:
        t = self.train
        bad = []
        if t.algo not in ALGOS:
            bad.append(f"train.algo must be one of {ALGOS}")
        for a in self.algos:
            if a not in ALGOS:
                bad.append(f"unknown algo {a!r} in algos")
        if t.steps < 0:
            bad.append("train.steps must be >= 0")
        if t.segment_length < 2:
            bad.append("train.segment_length must be >= 2")
        if not 0.0 < t.zeta <= 1.0:
            bad.append("train.zeta must lie in (0, 1]")
        if t.eta <= 0:
            bad.append("train.eta must be positive")
        if t.alpha_bar < 0:
            bad.append("train.alpha_bar must be >= 0")
        if not 0.0 <= t.gamma < 1.0:
            bad.append("train.gamma must lie in [0, 1)")
        if t.target_action not in ("sample", "mean"):
            bad.append("train.target_action must be 'sample' or 'mean'")
        if not 0.0 < t.dwbc_eta < 1.0:
            bad.append("train.dwbc_eta must lie in (0, 1)")
        if not 0.0 <= t.safedice_alpha < 1.0:
            bad.append("train.safedice_alpha must lie in [0, 1)")
        if not 0.0 <= self.data.noise_fraction < 1.0:
            bad.append("data.noise_fraction must lie in [0, 1)")
        if not self.seeds:
            bad.append("seeds must be nonempty")
        if bad:
            raise ConfigError("; ".join(bad))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"train.steps": 10})``."""
        d = self.to_dict()
        for k, v in updates.items():
            _set_dotted(d, k, v)
        return ExperimentConfig.from_dict(d)

    def hash(self, *, exclude_output: bool = True) -> str:
        d = self.to_dict()
        if exclude_output:
            d.pop("output_dir", None)
        return config_hash(d)

    def data_hash(self, seed: int) -> str:
        return config_hash({"env": self.env, "data": dataclasses.asdict(self.data), "seed": seed})


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config keys: {', '.join(prefix + u for u in unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_kv_file(path))


DESK_TRAIN = dict(
    steps=50_000,
    batch_size=64,
    lr_actor=3e-4,
    lr_cost=3e-4,
    lr_critic=3e-4,
    actor_hidden=[64, 64],
    critic_hidden=[64, 64],
    cost_hidden=[64, 64],
    embed_dim=32,
    segments_per_source=8,
    alpha_bar=2.0,
)


def desk_config(**overrides) -> ExperimentConfig:
    """Scaled-down settings for a single CPU core."""
    d = ExperimentConfig().to_dict()
    d["train"].update(DESK_TRAIN)
    cfg = ExperimentConfig.from_dict(d)
    return cfg.replace(**overrides) if overrides else cfg
