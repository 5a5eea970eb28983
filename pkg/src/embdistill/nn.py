"""Dense MLPs with hand-written backprop, Adam, and a warmup+cosine LR schedule.

All arithmetic is float64. Parameters live in plain numpy arrays that the
optimizer updates in place, so views handed out by ``Mlp.parameters`` stay
valid across steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericalError, UsageError

ACTIVATIONS = ("relu", "gelu")
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class DenseLayer:
    W: np.ndarray  # out x in
    b: np.ndarray  # out

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        if self.b.shape[0] != self.W.shape[0]:
            raise UsageError(f"bias length {self.b.shape[0]} != out dim {self.W.shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.layers:
            raise UsageError("an Mlp needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise UsageError(
                    f"layer {i} expects {self.layers[i].in_dim} inputs, "
                    f"layer {i - 1} produces {self.layers[i - 1].out_dim}"
                )

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, activation: str = "relu") -> "Mlp":
        """Kaiming-uniform (fan-in) weights, zero biases."""
        if len(dims) < 2 or any(int(d) <= 0 for d in dims):
            raise UsageError(f"dims must list at least two positive sizes, got {list(dims)}")
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / fan_in)
            layers.append(
                DenseLayer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))
            )
        return cls(layers, activation)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.W"] = layer.W
            out[f"{prefix}{i}.b"] = layer.b
        return out

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.W.copy(), l.b.copy()) for l in self.layers], self.activation)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    net_id: int
    shapes: list[tuple[int, int]]
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each hidden layer


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    return cdf + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def forward(net: Mlp, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.layers[0].in_dim:
        raise UsageError(f"input shape {X.shape} does not fit first layer ({net.layers[0].in_dim} inputs)")
    cache = ForwardCache(id(net), [l.W.shape for l in net.layers], [], [])
    h = X
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        cache.inputs.append(h)
        z = h @ layer.W.T + layer.b
        if i < last:
            cache.pre.append(z)
            h = _act(net.activation, z)
        else:
            h = z
    return h, cache


def backward(
    net: Mlp, cache: ForwardCache, dY: np.ndarray, prefix: str = ""
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients of ``sum(dY * Y)`` w.r.t. every parameter and X.

    Gradient keys match ``net.parameters(prefix)``.
    """
    if cache.net_id != id(net) or cache.shapes != [l.W.shape for l in net.layers]:
        raise UsageError("forward cache does not belong to this network")
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != (cache.inputs[0].shape[0], net.layers[-1].out_dim):
        raise UsageError(f"dY shape {dY.shape} does not match network output")
    grads: dict[str, np.ndarray] = {}
    g = dY
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if i < len(net.layers) - 1:
            g = g * _act_grad(net.activation, cache.pre[i])
        grads[f"{prefix}{i}.W"] = g.T @ cache.inputs[i]
        grads[f"{prefix}{i}.b"] = g.sum(axis=0)
        g = g @ layer.W
    return dict(reversed(list(grads.items()))), g


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise UsageError(f"gradient keys {sorted(grads)} differ from parameter keys {sorted(params)}")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise UsageError(f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class LrSchedule:
    total_steps: int
    base_lr: float = 8e-4
    warmup_frac: float = 0.1
    shape: str = "warmup-cosine"

    def __post_init__(self):
        if self.total_steps <= 0:
            raise UsageError(f"total_steps must be positive, got {self.total_steps}")
        if self.shape not in ("warmup-cosine", "constant"):
            raise UsageError(f"unknown schedule shape {self.shape!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise UsageError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_frac * self.total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.shape == "constant":
        return schedule.base_lr
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.base_lr * step / warm
    progress = (step - warm) / (schedule.total_steps - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
