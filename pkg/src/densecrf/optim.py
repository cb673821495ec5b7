"""SGD with momentum, weight decay and per-group learning rates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 1e-3


@dataclass
class OptimState:
    """Velocities plus hyperparameters.

    ``groups`` maps parameter name -> group; ``lr`` maps group -> step size.
    Weight decay applies only to groups listed in ``decay_groups``;
    names listed in ``floored`` are projected onto [SIGMA_FLOOR, inf).
    """

    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    decay_groups: frozenset = frozenset({"top", "body"})
    floored: frozenset = frozenset()
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        for g, eta in self.lr.items():
            if eta < 0:
                raise ValueError(f"learning rate for {g!r} is negative")


def sgd_step(params: dict, grads: dict, state: OptimState) -> dict:
    """In-place update ``v <- beta v + g + lambda theta; theta <- theta - eta v``.

    Raises FloatingPointError (before touching anything) on a non-finite
    gradient. Returns ``params``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    for name, g in grads.items():
        group = state.groups.get(name, "default")
        eta = state.lr.get(group, 0.0)
        theta = params[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta, dtype=np.float64)
        step = np.asarray(g, dtype=np.float64)
        if state.weight_decay and group in state.decay_groups:
            step = step + state.weight_decay * theta
        v = state.momentum * v + step
        state.velocity[name] = v
        if eta == 0.0:
            continue
        theta -= eta * v
        if name in state.floored:
            np.maximum(theta, SIGMA_FLOOR, out=theta)
    return params
