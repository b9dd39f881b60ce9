"""Parameter update operators for the leader and follower networks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float | None = None
    decay_interval: int | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or not self.eps > 0:
            raise ValueError("need 0 <= beta1, beta2 < 1 and eps > 0")
        if (self.decay_factor is None) != (self.decay_interval is None):
            raise ValueError("decay_factor and decay_interval go together")

    def lr_at(self, t):
        """Learning rate for the update following ``t`` completed updates."""
        if self.decay_factor is None:
            return self.lr
        return self.lr * self.decay_factor ** (t // self.decay_interval)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def step(params: dict, grads: dict, state: OptimizerState, config: OptimizerConfig):
    """Apply one update.  Returns new ``(params, state)``; inputs are not mutated."""
    if set(grads) != set(params):
        raise KeyError(f"gradients cover {sorted(grads)} but parameters are {sorted(params)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    if config.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > config.clip_norm:
            grads = {k: g * (config.clip_norm / total) for k, g in grads.items()}
    lr = config.lr_at(state.t)
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    if config.method == "sgd":
        for name, p in params.items():
            new_params[name] = p - lr * grads[name]
        return new_params, OptimizerState(m_new, v_new, t)
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return new_params, OptimizerState(m_new, v_new, t)
