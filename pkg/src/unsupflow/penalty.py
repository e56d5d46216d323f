"""Generalised Charbonnier penalty ``(x^2 + eps^2)^alpha``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1e-3


@dataclass(frozen=True)
class CharbonnierParams:
    alpha: float = 0.25
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def rho(x, p: CharbonnierParams):
    x = np.asarray(x, dtype=np.float64)
    return (x * x + p.epsilon ** 2) ** p.alpha


def rho_prime(x, p: CharbonnierParams):
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * p.alpha * x * (x * x + p.epsilon ** 2) ** (p.alpha - 1.0)


def rho_and_prime(x, p: CharbonnierParams):
    """Value and derivative sharing one power evaluation."""
    x = np.asarray(x, dtype=np.float64)
    base = x * x + p.epsilon ** 2
    powm1 = base ** (p.alpha - 1.0)
    return base * powm1, 2.0 * p.alpha * x * powm1
