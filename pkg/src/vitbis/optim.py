"""Adam with bias correction and (by default) decoupled weight decay."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigMismatch
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1.5e-4
    weight_decay: float = 5e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 300
    seed: int = 0
    decoupled_weight_decay: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigMismatch("lr must be >= 0, batch_size >= 1, max_steps >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigMismatch("betas must lie in [0, 1) and adam_eps > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigMismatch(f"unknown optim config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: OptimConfig,
) -> bool:
    """Update ``params`` in place. Returns False (and leaves everything
    untouched) when any gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s at step %d; update skipped", name, state.t + 1)
            return False
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not cfg.decoupled_weight_decay and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        data = p.data
        if cfg.decoupled_weight_decay and cfg.weight_decay:
            data = data - cfg.lr * cfg.weight_decay * data
        p.data = data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return True
