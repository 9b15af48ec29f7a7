"""Heavy-ball SGD with L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Hyperparameters plus per-parameter velocity buffers."""

    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.99
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One in-place update of every parameter.

    For each parameter w with gradient g:
        g' = g + weight_decay * w
        v  = momentum * v - learning_rate * g'
        w += v
    Raises on non-finite gradients, naming the offending parameter.
    """
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        g = g + state.weight_decay * w
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
            state.velocity[name] = v
        v *= state.momentum
        v -= state.learning_rate * g
        w += v
