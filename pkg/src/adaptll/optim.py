"""SGD with momentum, applied in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    velocity: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise UsageError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params, learning_rate: float, momentum: float = 0.9) -> "SgdState":
        return cls(learning_rate, momentum, [np.zeros_like(p) for p in params])


def sgd_step(params, grads, state: SgdState) -> None:
    """``v <- momentum * v + g``; ``p <- p - lr * v`` for each parameter."""
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads and {len(state.velocity)} velocity buffers"
        )
    for p, g, v in zip(params, grads, state.velocity):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError(f"param {p.shape}, grad {g.shape} and velocity {v.shape} disagree")
    lr = state.learning_rate
    mom = state.momentum
    for p, g, v in zip(params, grads, state.velocity):
        v *= v.dtype.type(mom)
        v += g
        p -= p.dtype.type(lr) * v
