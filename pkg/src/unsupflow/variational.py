"""Per-pair flow estimation by coarse-to-fine Adam descent on the total loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import as_image, check_same_size, upsample_flow
from .losses import LossConfig, image_pyramid, total_loss
from .optim import AdamParams, AdamState, adam_step

MIN_LEVEL_SIZE = 8


class PyramidTooDeepError(ValueError):
    pass


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 3
    iterations_per_level: int = 200
    optimizer: AdamParams = field(default_factory=lambda: AdamParams(lr=0.05))
    scale_factor: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")
        if self.scale_factor != 2:
            raise ValueError("only dyadic pyramids (scale_factor=2) are supported")
        if self.iterations_per_level < 0:
            raise ValueError("iterations_per_level must be >= 0")


@dataclass(frozen=True)
class TraceEntry:
    level: int
    iteration: int
    photometric: float
    smoothness: float
    total: float


def _check_depth(shape, levels):
    h, w = shape
    for _ in range(levels - 1):
        h, w = (h + 1) // 2, (w + 1) // 2
    if h < MIN_LEVEL_SIZE or w < MIN_LEVEL_SIZE:
        raise PyramidTooDeepError(
            f"{levels} levels on a {shape[0]}x{shape[1]} image leave a {h}x{w} coarsest level "
            f"(minimum {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE})"
        )


def solve_flow(img1, img2, cfg: LossConfig, pyr: PyramidConfig = PyramidConfig(), seed: int = 0):
    """Estimate the flow from ``img1`` to ``img2``.

    Returns ``(flow, trace)``; ``trace`` holds one :class:`TraceEntry` per
    evaluated iterate, coarsest level first (level index 0 is full
    resolution). The last entry of each level is the loss after its final
    step. The optimisation is fully deterministic; ``seed`` is accepted for
    interface uniformity and does not influence the result.
    """
    del seed
    img1 = as_image(img1)
    img2 = as_image(img2)
    check_same_size(img1, img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    _check_depth(img1.shape[:2], pyr.levels)

    pyr1 = image_pyramid(img1, pyr.levels)
    pyr2 = image_pyramid(img2, pyr.levels)
    trace: list[TraceEntry] = []
    flow = np.zeros(pyr1[-1].shape[:2] + (2,))
    for level in range(pyr.levels - 1, -1, -1):
        a, b = pyr1[level], pyr2[level]
        if flow.shape[:2] != a.shape[:2]:
            flow = upsample_flow(flow, a.shape[:2])
        state = AdamState.zeros(flow.shape)
        for it in range(pyr.iterations_per_level + 1):
            rep = total_loss(flow, a, b, cfg)
            trace.append(TraceEntry(level, it, rep.photometric, rep.smoothness, rep.total))
            if it == pyr.iterations_per_level:
                break
            flow = flow + adam_step(state, rep.grad_flow, pyr.optimizer)
    return flow, trace
