"""Unsupervised flow objective: robust photometric + robust smoothness terms.

All gradients are with respect to the flow field and are exact (up to the
sub-gradient convention of the bilinear sampler).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import area_downsample, as_flow, as_image, check_same_size
from .penalty import CharbonnierParams, rho_and_prime
from .warp import bilinear_warp


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    photo: CharbonnierParams = field(default_factory=lambda: CharbonnierParams(alpha=0.25))
    smooth: CharbonnierParams = field(default_factory=lambda: CharbonnierParams(alpha=0.37))
    mask_out_of_bounds: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"smoothness weight must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class LossReport:
    photometric: float
    smoothness: float
    total: float
    grad_flow: np.ndarray


def photometric_loss(flow, img1, img2, cfg: LossConfig):
    """Robust brightness-constancy between ``img1`` and ``img2`` warped back by ``flow``.

    The penalty is applied to each channel's residual separately and summed.
    With ``cfg.normalize`` the sum becomes a mean over the included
    pixel-channels.
    """
    flow = as_flow(flow)
    img1 = as_image(img1)
    img2 = as_image(img2)
    check_same_size(flow, img1, img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")

    res = bilinear_warp(img2, flow)
    val, dval = rho_and_prime(img1 - res.warped, cfg.photo)
    channels = img1.shape[2]
    if cfg.mask_out_of_bounds:
        keep = res.mask[:, :, None]
        val = np.where(keep, val, 0.0)
        dval = np.where(keep, dval, 0.0)
        count = int(res.mask.sum()) * channels
    else:
        count = val.size
    value = float(val.sum())
    # d residual / d warped = -1
    grad = np.empty(flow.shape)
    grad[..., 0] = -np.sum(dval * res.d_dx2, axis=2)
    grad[..., 1] = -np.sum(dval * res.d_dy2, axis=2)
    if cfg.normalize and count > 0:
        value /= count
        grad /= count
    return value, grad


def smoothness_loss(flow, cfg: LossConfig):
    """Robust penalty on horizontal and vertical first differences of u and v.

    Differences across the image border are skipped. With ``cfg.normalize``
    the sum is divided by the pixel count ``H * W``.
    """
    flow = as_flow(flow)
    grad = np.zeros(flow.shape)
    value = 0.0
    for ch in range(2):
        comp = flow[..., ch]
        g = grad[..., ch]
        dx = comp[:, :-1] - comp[:, 1:]
        val, d = rho_and_prime(dx, cfg.smooth)
        value += float(val.sum())
        g[:, :-1] += d
        g[:, 1:] -= d
        dy = comp[:-1, :] - comp[1:, :]
        val, d = rho_and_prime(dy, cfg.smooth)
        value += float(val.sum())
        g[:-1, :] += d
        g[1:, :] -= d
    if cfg.normalize:
        n = flow.shape[0] * flow.shape[1]
        value /= n
        grad /= n
    return value, grad


def total_loss(flow, img1, img2, cfg: LossConfig) -> LossReport:
    photo, g_photo = photometric_loss(flow, img1, img2, cfg)
    smooth, g_smooth = smoothness_loss(flow, cfg)
    return LossReport(
        photometric=photo,
        smoothness=smooth,
        total=photo + cfg.lam * smooth,
        grad_flow=g_photo + cfg.lam * g_smooth,
    )


def image_pyramid(img, levels: int) -> list[np.ndarray]:
    """``levels`` images, full resolution first, each a 2x2 area average of the previous."""
    pyr = [as_image(img)]
    for _ in range(levels - 1):
        pyr.append(area_downsample(pyr[-1]))
    return pyr


def _level_of(shape, full_shape) -> int:
    h, w = full_shape
    for k in range(32):
        if h % (1 << k) or w % (1 << k):
            break
        if (h >> k, w >> k) == tuple(shape):
            return k
    raise ValueError(f"prediction of size {tuple(shape)} is not a dyadic level of {full_shape}")


def multiscale_terms(predictions, img1, img2, cfg: LossConfig) -> list[LossReport]:
    """Per-level :func:`total_loss` against area-downsampled copies of the images."""
    img1 = as_image(img1)
    img2 = as_image(img2)
    full = img1.shape[:2]
    levels = [_level_of(as_flow(p).shape[:2], full) for p in predictions]
    depth = max(levels, default=0) + 1
    pyr1 = image_pyramid(img1, depth)
    pyr2 = image_pyramid(img2, depth)
    return [total_loss(p, pyr1[k], pyr2[k], cfg) for p, k in zip(predictions, levels)]


def multiscale_loss(predictions, img1, img2, weights, cfg: LossConfig):
    """Weighted sum of per-level total losses.

    Each prediction is expressed in its own level's pixel units. Returns
    ``(value, grads)`` with one gradient per prediction.
    """
    if len(weights) != len(predictions):
        raise ValueError(f"{len(predictions)} predictions but {len(weights)} weights")
    reports = multiscale_terms(predictions, img1, img2, cfg)
    value = float(sum(w * r.total for w, r in zip(weights, reports)))
    grads = [w * r.grad_flow for w, r in zip(weights, reports)]
    return value, grads
