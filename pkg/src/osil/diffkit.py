"""Numpy substrate for every learner in the package.

Parameters live in flat float64 vectors with a named layout, MLPs carry a
hand-written backward pass, and optimisation is plain Adam with decoupled
weight decay.  Everything is batched over the leading axis.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("tanh", "relu")
OUTPUT_TRANSFORMS = ("identity", "sigmoid", "unit_normalize")
CHECKPOINT_VERSION = 1


def make_rng(seed: int, *keys: str) -> np.random.Generator:
    """Independent generator for a named substream of ``seed``.

    Streams with different key paths never share state, so e.g. the policy
    initialisation is unaffected by how many draws the cost model consumed.
    """
    spawn_key = tuple(zlib.crc32(k.encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.layout = [(str(n), tuple(int(d) for d in s)) for n, s in self.layout]
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ShapeError(f"parameter vector has {self.values.size} values, layout needs {expected}")
        self._offsets = {}
        start = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self._offsets[name] = (start, start + size, shape)
            start += size

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return self.values[lo:hi].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.layout))


class Mlp:
    """Fully connected network ``x @ W + b`` with an optional output transform.

    Weights are stored ``(fan_in, fan_out)``.  Hidden layers use
    ``activation``; the last layer is affine followed by ``output_transform``.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: str = "tanh",
        output_transform: str = "identity",
        params: ParamVector | None = None,
        rng: np.random.Generator | None = None,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"layer_sizes must hold at least two positive ints, got {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if output_transform not in OUTPUT_TRANSFORMS:
            raise ConfigError(f"unknown output transform {output_transform!r}")
        self.layer_sizes = sizes
        self.activation = activation
        self.output_transform = output_transform
        layout = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layout.append((f"layer{i}.weight", (fan_in, fan_out)))
            layout.append((f"layer{i}.bias", (fan_out,)))
        if params is None:
            params = ParamVector(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)
            glorot_init(params, rng if rng is not None else np.random.default_rng(0))
        elif params.layout != [(n, tuple(s)) for n, s in layout]:
            raise ShapeError("parameter layout does not match layer sizes")
        self.params = params

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params.view(f"layer{i}.weight"), self.params.view(f"layer{i}.bias")

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation, self.output_transform, self.params.copy())

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, z, a):
        return 1.0 - a * a if self.activation == "tanh" else (z > 0.0).astype(float)

    def forward(self, x, return_cache: bool = False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of width {self.in_dim}, got shape {np.shape(x)}")
        acts = [x]
        pre = []
        h = x
        for i in range(self.n_layers):
            W, b = self.weights(i)
            z = h @ W + b
            pre.append(z)
            if i < self.n_layers - 1:
                h = self._act(z)
                acts.append(h)
        logits = pre[-1]
        out = self._transform(logits)
        cache = (acts, pre, out, single)
        if single:
            out = out[0]
        return (out, cache) if return_cache else out

    __call__ = forward

    def _transform(self, z):
        if self.output_transform == "identity":
            return z
        if self.output_transform == "sigmoid":
            return sigmoid(z)
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        return z / np.maximum(norm, 1e-300)

    def backward(self, cache, grad_out):
        """Return ``(flat parameter gradient, input gradient)`` for ``grad_out``."""
        acts, pre, out, single = cache
        g = np.asarray(grad_out, dtype=float)
        if single:
            g = g[None, :]
        if g.shape != out.shape:
            raise ShapeError(f"output gradient shape {g.shape} does not match output {out.shape}")
        if self.output_transform == "sigmoid":
            g = g * out * (1.0 - out)
        elif self.output_transform == "unit_normalize":
            norm = np.linalg.norm(pre[-1], axis=1, keepdims=True)
            g = (g - out * np.sum(out * g, axis=1, keepdims=True)) / np.maximum(norm, 1e-300)
        grad = np.empty_like(self.params.values)
        for i in reversed(range(self.n_layers)):
            W, _ = self.weights(i)
            lo, hi, _ = self.params._offsets[f"layer{i}.weight"]
            grad[lo:hi] = (acts[i].T @ g).ravel()
            blo, bhi, _ = self.params._offsets[f"layer{i}.bias"]
            grad[blo:bhi] = g.sum(axis=0)
            if not np.all(np.isfinite(grad[lo:bhi])):
                raise NumericError("non-finite gradient", layer=f"layer{i}")
            g = g @ W.T
            if i > 0:
                g = g * self._act_grad(pre[i - 1], acts[i])
        return grad, (g[0] if single else g)

    def logit_input_gradient(self, x, return_cache: bool = False):
        """Gradient of the (pre-transform, scalar) output with respect to ``x``."""
        if self.out_dim != 1:
            raise ShapeError("input gradients are only defined for scalar-output networks")
        _, cache = self.forward(x, return_cache=True)
        acts, pre, _, _ = cache
        n = acts[0].shape[0]
        deltas = [None] * self.n_layers
        gs = [None] * self.n_layers
        delta = np.ones((n, 1))
        for i in reversed(range(self.n_layers)):
            deltas[i] = delta
            W, _ = self.weights(i)
            g = delta @ W.T
            gs[i] = g
            if i > 0:
                delta = g * self._act_grad(pre[i - 1], acts[i])
        u = gs[0]
        return (u, (cache, deltas, gs)) if return_cache else u

    def logit_input_gradient_vjp(self, state, u_bar):
        """Parameter gradient of ``sum(u_bar * d logit / d x)`` (double backprop)."""
        (acts, pre, _, _), deltas, gs = state
        grad = np.zeros_like(self.params.values)
        z_bar = [np.zeros_like(z) for z in pre]
        g_bar = np.asarray(u_bar, dtype=float)
        for i in range(self.n_layers):
            # g_i = delta_i @ W_i.T
            W, _ = self.weights(i)
            lo, hi, _ = self.params._offsets[f"layer{i}.weight"]
            grad[lo:hi] += (g_bar.T @ deltas[i]).ravel()
            if i == self.n_layers - 1:
                break
            delta_bar = g_bar @ W
            # delta_{i+1} = g_{i+1} * act'(z_i)
            a = acts[i + 1]
            z = pre[i]
            if self.activation == "tanh":
                d1 = 1.0 - a * a
                d2 = -2.0 * a * d1
            else:
                d1 = (z > 0.0).astype(float)
                d2 = np.zeros_like(z)
            z_bar[i] += delta_bar * gs[i + 1] * d2
            g_bar = delta_bar * d1
        # push the pre-activation adjoints back through the forward graph
        a_bar = np.zeros_like(acts[-1])
        for i in reversed(range(self.n_layers)):
            if i == self.n_layers - 1:
                zt = z_bar[i]
            else:
                zt = a_bar * self._act_grad(pre[i], acts[i + 1]) + z_bar[i]
            lo, hi, _ = self.params._offsets[f"layer{i}.weight"]
            grad[lo:hi] += (acts[i].T @ zt).ravel()
            blo, bhi, _ = self.params._offsets[f"layer{i}.bias"]
            grad[blo:bhi] += zt.sum(axis=0)
            W, _ = self.weights(i)
            a_bar = zt @ W.T
        return grad

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "output_transform": self.output_transform,
            "layout": [[n, list(s)] for n, s in self.params.layout],
            "values": self.params.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        params = ParamVector(np.asarray(d["values"], dtype=float), [(n, tuple(s)) for n, s in d["layout"]])
        return cls(d["layer_sizes"], d["activation"], d["output_transform"], params)


def glorot_init(params: ParamVector, rng: np.random.Generator) -> ParamVector:
    for name, shape in params.layout:
        v = params.view(name)
        if name.endswith(".weight"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            v[...] = rng.uniform(-limit, limit, size=shape)
        else:
            v[...] = 0.0
    return params


def mlp_forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def mlp_backward(net: Mlp, x, output_grad) -> tuple[np.ndarray, np.ndarray]:
    _, cache = net.forward(x, return_cache=True)
    return net.backward(cache, output_grad)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: ParamVector, learning_rate=1e-3, weight_decay=0.0, **kw) -> "AdamState":
        n = len(params)
        return cls(np.zeros(n), np.zeros(n), 0, float(learning_rate), weight_decay=float(weight_decay), **kw)


def adam_step(state: AdamState, params: ParamVector, grads) -> ParamVector:
    """One Adam update in place; decoupled decay shrinks params before the moments move."""
    g = np.asarray(grads, dtype=float)
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ShapeError("gradient, moments and parameters must have equal length")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to adam_step")
    lr = state.learning_rate
    if state.weight_decay:
        params.values -= lr * state.weight_decay * params.values
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    params.values -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon_adam)
    return params


def clip_grad_norm(grads: list[np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.dot(g, g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class Adam:
    """Adam over several networks with a shared gradient-norm clip."""

    def __init__(self, nets: Iterable[Mlp], learning_rate=1e-3, weight_decay=0.0, max_grad_norm=None):
        self.nets = list(nets)
        self.states = [AdamState.for_params(n.params, learning_rate, weight_decay) for n in self.nets]
        self.max_grad_norm = max_grad_norm

    def step(self, grads: list[np.ndarray]) -> float:
        if len(grads) != len(self.nets):
            raise ShapeError("one gradient per network is required")
        norm = clip_grad_norm(grads, self.max_grad_norm)
        for net, state, g in zip(self.nets, self.states, grads):
            adam_step(state, net.params, g)
        return norm


def polyak_update(target: ParamVector, online: ParamVector, zeta: float) -> ParamVector:
    if not (0.0 < zeta <= 1.0):
        raise ConfigError(f"polyak coefficient must lie in (0, 1], got {zeta}")
    if target.layout != online.layout:
        raise ShapeError("target and online layouts differ")
    if zeta == 1.0:
        target.values[...] = online.values
    else:
        target.values *= 1.0 - zeta
        target.values += zeta * online.values
    return target


def save_checkpoint(path, nets: dict[str, Mlp], meta: dict | None = None) -> None:
    doc = {
        "format": "osil-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {name: net.to_dict() for name, net in nets.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "osil-checkpoint":
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    return {name: Mlp.from_dict(d) for name, d in doc["nets"].items()}, doc.get("meta", {})


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
