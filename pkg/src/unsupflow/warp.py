"""Differentiable backward warping by bilinear sampling.

A target pixel ``(x1, y1)`` samples the source at ``(x1 + u, y1 + v)``. The
sampler is the literal zero-padded sum over the integer grid with tent
weights ``max(0, 1 - |d|)``, so samples near the border receive partial
(or no) contribution. At integer sampling coordinates the derivative is
taken from the cell to the right/below (floor-based cell).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import as_flow, as_image, check_same_size


@dataclass(frozen=True)
class WarpResult:
    warped: np.ndarray
    mask: np.ndarray
    d_dx2: np.ndarray
    d_dy2: np.ndarray


def sampling_grid(flow):
    """Per-pixel sampling coordinates ``(x2, y2)``, each an ``(H, W)`` array."""
    flow = as_flow(flow)
    h, w = flow.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    return cols + flow[..., 0], rows + flow[..., 1]


def bilinear_warp(source, flow) -> WarpResult:
    source = as_image(source)
    flow = as_flow(flow)
    check_same_size(source, flow)
    out, mask, dx, dy = kernels.warp_gather(source, flow)
    return WarpResult(out, mask, dx, dy)


def warp_backward(source, flow, upstream, result: WarpResult | None = None):
    """Gradients of ``sum(upstream * warped)`` w.r.t. the flow and the source.

    Pass the forward ``result`` to skip recomputing the sampling derivatives.
    """
    source = as_image(source)
    flow = as_flow(flow)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 2:
        upstream = upstream[:, :, None]
    check_same_size(source, flow, upstream)
    if upstream.shape != source.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match source {source.shape}")
    if result is None:
        result = bilinear_warp(source, flow)
    grad_flow = np.empty(flow.shape)
    grad_flow[..., 0] = np.sum(upstream * result.d_dx2, axis=2)
    grad_flow[..., 1] = np.sum(upstream * result.d_dy2, axis=2)
    grad_source = kernels.warp_scatter(upstream, flow)
    return grad_flow, grad_source
