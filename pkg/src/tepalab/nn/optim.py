from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import Tensor


class SGD:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Mapping[Tensor, np.ndarray] | None = None) -> None:
        if grads is not None:
            extra = [t for t in grads if not any(t is p for p in self.params)]
            if extra:
                raise ContractError(f"{len(extra)} gradient(s) for tensors this optimizer does not own")
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads.get(p)
            if g is None:
                raise ContractError(f"missing gradient for parameter {p.name or i}")
            v = self.velocity[i]
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[i] = v
            p.data = (p.data - self.lr * v).astype(p.dtype, copy=False)

    def state(self) -> list[np.ndarray | None]:
        return [None if v is None else v.copy() for v in self.velocity]

    def load_state(self, velocity: list[np.ndarray | None]) -> None:
        if len(velocity) != len(self.params):
            raise ContractError("velocity list does not match parameter list")
        self.velocity = [None if v is None else v.copy() for v in velocity]


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """Functional form on plain arrays. Returns ``(new_params, new_velocity)``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    velocity = velocity if velocity is not None else [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    new_v = [momentum * v + np.asarray(g) for v, g in zip(velocity, grads)]
    new_p = [np.asarray(p) - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v
