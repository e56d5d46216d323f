"""Hot inner loops, each in two interchangeable flavours.

Every kernel exists as a numba ``@njit`` loop and as a pure-numpy
vectorised version with the same signature. The active backend is picked
once at import time:

* ``UNSUPFLOW_NO_NUMBA=1`` (or numba missing) selects numpy;
* otherwise numba is used.

``benchmarks/bench_kernels.py`` times both. Results agree to rounding
(the numpy path reorders a few additions), and each path is deterministic
on its own.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("UNSUPFLOW_NO_NUMBA", "").strip() not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_corners(flow):
    h, w = flow.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    x2 = cols + flow[..., 0]
    y2 = rows + flow[..., 1]
    x0f = np.floor(x2)
    y0f = np.floor(y2)
    fx = x2 - x0f
    fy = y2 - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    mask = (x2 >= 0) & (x2 <= w - 1) & (y2 >= 0) & (y2 <= h - 1)
    return x2, y2, x0, y0, fx, fy, mask


def _np_fetch(src, yy, xx):
    h, w = src.shape[:2]
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return np.where(ok[..., None], vals, 0.0)


def warp_gather_numpy(src, flow):
    """Bilinear backward warp. Returns (warped, mask, d/dx2, d/dy2)."""
    _, _, x0, y0, fx, fy, mask = _np_corners(flow)
    v00 = _np_fetch(src, y0, x0)
    v01 = _np_fetch(src, y0, x0 + 1)
    v10 = _np_fetch(src, y0 + 1, x0)
    v11 = _np_fetch(src, y0 + 1, x0 + 1)
    fx = fx[..., None]
    fy = fy[..., None]
    out = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    return out, mask, dx, dy


def warp_scatter_numpy(upstream, flow):
    """Adjoint of the warp with respect to the source image."""
    h, w, c = upstream.shape
    _, _, x0, y0, fx, fy, _ = _np_corners(flow)
    grad = np.zeros(h * w * c)
    chan = np.arange(c)
    for dy_, dx_, wgt in (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy_
        xx = x0 + dx_
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        base = (yy[ok] * w + xx[ok]) * c
        idx = (base[:, None] + chan[None, :]).ravel()
        vals = (wgt[ok][:, None] * upstream[ok]).ravel()
        grad += np.bincount(idx, weights=vals, minlength=h * w * c)
    return grad.reshape(h, w, c)


def im2col_numpy(x, k, stride, pad):
    """(N,C,H,W) -> (C*k*k, N*Ho*Wo) patch matrix for cross-correlation."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def col2im_numpy(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col_numpy`; ``shape`` is the (N,C,H,W) image shape."""
    n, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _warp_gather_nb(src, flow):
        h, w, c = src.shape
        out = np.zeros((h, w, c))
        dx = np.zeros((h, w, c))
        dy = np.zeros((h, w, c))
        mask = np.zeros((h, w), dtype=np.bool_)
        for r in range(h):
            for q in range(w):
                x2 = q + flow[r, q, 0]
                y2 = r + flow[r, q, 1]
                x0f = np.floor(x2)
                y0f = np.floor(y2)
                fx = x2 - x0f
                fy = y2 - y0f
                x0 = int(x0f)
                y0 = int(y0f)
                mask[r, q] = x2 >= 0 and x2 <= w - 1 and y2 >= 0 and y2 <= h - 1
                in_x0 = 0 <= x0 < w
                in_x1 = 0 <= x0 + 1 < w
                in_y0 = 0 <= y0 < h
                in_y1 = 0 <= y0 + 1 < h
                for ch in range(c):
                    v00 = src[y0, x0, ch] if (in_y0 and in_x0) else 0.0
                    v01 = src[y0, x0 + 1, ch] if (in_y0 and in_x1) else 0.0
                    v10 = src[y0 + 1, x0, ch] if (in_y1 and in_x0) else 0.0
                    v11 = src[y0 + 1, x0 + 1, ch] if (in_y1 and in_x1) else 0.0
                    out[r, q, ch] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
                    dx[r, q, ch] = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
                    dy[r, q, ch] = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
        return out, mask, dx, dy

    @_jit
    def _warp_scatter_nb(upstream, flow):
        h, w, c = upstream.shape
        grad = np.zeros((h, w, c))
        for r in range(h):
            for q in range(w):
                x2 = q + flow[r, q, 0]
                y2 = r + flow[r, q, 1]
                x0f = np.floor(x2)
                y0f = np.floor(y2)
                fx = x2 - x0f
                fy = y2 - y0f
                x0 = int(x0f)
                y0 = int(y0f)
                for a in range(2):
                    yy = y0 + a
                    if yy < 0 or yy >= h:
                        continue
                    wy = fy if a == 1 else 1.0 - fy
                    for b in range(2):
                        xx = x0 + b
                        if xx < 0 or xx >= w:
                            continue
                        wgt = wy * (fx if b == 1 else 1.0 - fx)
                        for ch in range(c):
                            grad[yy, xx, ch] += wgt * upstream[r, q, ch]
        return grad

    @_jit
    def _im2col_nb(x, k, stride, pad):
        n, c, h, w = x.shape
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        cols = np.zeros((c * k * k, n * ho * wo), dtype=x.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = (b * ho + oy) * wo
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    cols[row, base + ox] = x[b, ch, iy, ix]
        return cols

    @_jit
    def _col2im_nb(cols, n, c, h, w, k, stride, pad):
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        img = np.zeros((n, c, h, w), dtype=cols.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = (b * ho + oy) * wo
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    img[b, ch, iy, ix] += cols[row, base + ox]
        return img

    def warp_gather_numba(src, flow):
        return _warp_gather_nb(np.ascontiguousarray(src, dtype=np.float64),
                               np.ascontiguousarray(flow, dtype=np.float64))

    def warp_scatter_numba(upstream, flow):
        return _warp_scatter_nb(np.ascontiguousarray(upstream, dtype=np.float64),
                                np.ascontiguousarray(flow, dtype=np.float64))

    def im2col_numba(x, k, stride, pad):
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad)

    def col2im_numba(cols, shape, k, stride, pad):
        n, c, h, w = shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad)


numpy_impl = SimpleNamespace(
    name="numpy",
    warp_gather=warp_gather_numpy,
    warp_scatter=warp_scatter_numpy,
    im2col=im2col_numpy,
    col2im=col2im_numpy,
)

if HAVE_NUMBA:
    numba_impl = SimpleNamespace(
        name="numba",
        warp_gather=warp_gather_numba,
        warp_scatter=warp_scatter_numba,
        im2col=im2col_numba,
        col2im=col2im_numba,
    )
else:  # pragma: no cover
    numba_impl = None

active = numba_impl if USE_NUMBA else numpy_impl
BACKEND = active.name

warp_gather = active.warp_gather
warp_scatter = active.warp_scatter
im2col = active.im2col
col2im = active.col2im
