"""Adam and the step-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps_hat > 0:
            raise ValueError("eps_hat must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "AdamState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), 0)


def adam_step(state: AdamState, grad, p: AdamParams, lr: float | None = None) -> np.ndarray:
    """Advance ``state`` by one bias-corrected Adam step and return the parameter delta."""
    grad = np.asarray(grad, dtype=state.m.dtype)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    lr = p.lr if lr is None else lr
    state.t += 1
    state.m *= p.beta1
    state.m += (1.0 - p.beta1) * grad
    state.v *= p.beta2
    state.v += (1.0 - p.beta2) * grad * grad
    m_hat = state.m / (1.0 - p.beta1 ** state.t)
    v_hat = state.v / (1.0 - p.beta2 ** state.t)
    return -lr * m_hat / (np.sqrt(v_hat) + p.eps_hat)


def halved_lr(base_lr: float, iteration: int, period: int) -> float:
    """Learning rate after halving every ``period`` iterations."""
    if period <= 0:
        return base_lr
    return base_lr * 0.5 ** (iteration // period)
