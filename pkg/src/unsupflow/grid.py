"""Raster conventions, file I/O and flow visualisation.

Data is carried in plain numpy arrays:

* image  -- ``(H, W, C)`` float, C in {1, 3}, nominally in [0, 1]
* flow   -- ``(H, W, 2)`` float, ``[..., 0]`` = u (rightward), ``[..., 1]`` = v (downward)
* mask   -- ``(H, W)`` bool
* scalar grid -- ``(H, W)`` float

Pixel centres sit at integer coordinates with the origin at the top-left.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

FLO_MAGIC = 202021.25
_FLO_HEADER = struct.Struct("<fii")


class RasterError(ValueError):
    """Base class for image decoding problems."""


class MissingRasterError(RasterError, FileNotFoundError):
    pass


class MalformedRasterError(RasterError):
    pass


class UnsupportedRasterError(RasterError):
    pass


class FloFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def as_image(img) -> np.ndarray:
    """Return ``img`` as a float64 ``(H, W, C)`` array, adding a channel axis to 2-D input."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, C) image with C in {{1, 3}}, got shape {arr.shape}")
    return arr


def as_flow(flow) -> np.ndarray:
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 2) flow field, got shape {arr.shape}")
    return arr


def check_same_size(*arrays) -> tuple[int, int]:
    sizes = {a.shape[:2] for a in arrays}
    if len(sizes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(sizes)}")
    return sizes.pop()


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into an ``(H, W, C)`` array in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingRasterError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            data = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise MalformedRasterError(f"malformed raster: {path} ({exc})") from exc
    if mode not in ("L", "RGB"):
        raise UnsupportedRasterError(f"unsupported raster mode {mode!r} in {path}; need 8-bit L or RGB")
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float64) / 255.0


def to_bytes(img) -> np.ndarray:
    """Quantise [0, 1] values to uint8 with clamping and round-half-up."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path) -> None:
    img = as_image(img)
    data = to_bytes(img)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(data, mode="RGB")
    pil.save(os.fspath(path), format="PNG")


def write_mask(mask, path) -> None:
    write_image(np.asarray(mask, dtype=np.float64), path)


def read_mask(path) -> np.ndarray:
    return read_image(path)[:, :, 0] > 0.5


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FLO_HEADER.size:
        raise FloFormatError(f"not a flo file: {path} (truncated header)")
    magic, width, height = _FLO_HEADER.unpack_from(raw)
    if magic != FLO_MAGIC:
        raise FloFormatError(f"not a flo file: {path} (magic {magic!r})")
    if width < 1 or height < 1:
        raise FloFormatError(f"invalid flo dimensions {width}x{height} in {path}")
    expected = 8 * width * height
    if len(raw) - _FLO_HEADER.size != expected:
        raise FloFormatError(
            f"size mismatch in {path}: header says {width}x{height} "
            f"({expected} payload bytes), found {len(raw) - _FLO_HEADER.size}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_FLO_HEADER.size)
    return data.reshape(height, width, 2).astype(np.float64)


def write_flo(flow, path) -> None:
    flow = as_flow(flow)
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    height, width = flow.shape[:2]
    payload = np.ascontiguousarray(flow, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_FLO_HEADER.pack(FLO_MAGIC, width, height))
        fh.write(payload)


# ---------------------------------------------------------------------------
# visualisation
# ---------------------------------------------------------------------------

def colorize_flow(flow, max_magnitude: float | str | None = "auto") -> np.ndarray:
    """Colour-wheel rendering: hue from direction, saturation from magnitude.

    Zero flow is white. ``max_magnitude="auto"`` normalises by the largest
    vector in the field.
    """
    flow = as_flow(flow)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude in (None, "auto"):
        max_magnitude = float(mag.max())
    max_magnitude = float(max_magnitude)
    if max_magnitude <= 0:
        max_magnitude = 1.0
    hue = np.mod(np.arctan2(v, u) / (2 * np.pi), 1.0)
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


# ---------------------------------------------------------------------------
# dyadic resampling
# ---------------------------------------------------------------------------

def area_downsample(img, axes=(0, 1)) -> np.ndarray:
    """2x2 box average along ``axes``; odd sizes are edge-padded first."""
    arr = np.asarray(img)
    for ax in axes:
        n = arr.shape[ax]
        if n % 2:
            last = np.take(arr, [n - 1], axis=ax)
            arr = np.concatenate([arr, last], axis=ax)
        even = np.take(arr, np.arange(0, arr.shape[ax], 2), axis=ax)
        odd = np.take(arr, np.arange(1, arr.shape[ax], 2), axis=ax)
        arr = 0.5 * (even + odd)
    return arr


def _up_axis(x, ax):
    n = x.shape[ax]
    idx = np.arange(n)
    prev = np.take(x, np.maximum(idx - 1, 0), axis=ax)
    nxt = np.take(x, np.minimum(idx + 1, n - 1), axis=ax)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=ax + 1)
    shape = list(x.shape)
    shape[ax] = 2 * n
    return out.reshape(shape)


def _up_axis_adjoint(g, ax):
    n = g.shape[ax] // 2
    shape = list(g.shape)
    shape[ax:ax + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=ax + 1)
    go = np.take(g, 1, axis=ax + 1)
    out = 0.75 * (ge + go)
    idx = np.arange(n)
    # even[i] read x[i-1] (clamped); odd[i] read x[i+1] (clamped)
    out = out + _scatter_axis(0.25 * ge, np.maximum(idx - 1, 0), ax, n)
    out = out + _scatter_axis(0.25 * go, np.minimum(idx + 1, n - 1), ax, n)
    return out


def _scatter_axis(vals, targets, ax, n):
    moved = np.moveaxis(vals, ax, 0)
    acc = np.zeros((n,) + moved.shape[1:], dtype=moved.dtype)
    np.add.at(acc, targets, moved)
    return np.moveaxis(acc, 0, ax)


def bilinear_upsample2(x, axes=(0, 1)) -> np.ndarray:
    """Double the size along ``axes`` by bilinear interpolation (half-pixel aligned, edge clamped)."""
    out = np.asarray(x)
    for ax in axes:
        out = _up_axis(out, ax)
    return out


def bilinear_upsample2_adjoint(g, axes=(0, 1)) -> np.ndarray:
    out = np.asarray(g)
    for ax in reversed(axes):
        out = _up_axis_adjoint(out, ax)
    return out


def upsample_flow(flow, shape=None) -> np.ndarray:
    """Upsample a flow field one pyramid level, doubling its values.

    ``shape`` optionally crops the result to a target ``(H, W)`` (for odd
    sized finer levels).
    """
    up = 2.0 * bilinear_upsample2(as_flow(flow), axes=(0, 1))
    if shape is not None:
        up = up[: shape[0], : shape[1]]
    return up


def sample_bilinear(src, x, y, mode: str = "zero") -> np.ndarray:
    """Sample ``src`` (``(H, W)`` or ``(H, W, C)``) at real coordinates ``x``, ``y``.

    ``mode="zero"`` treats the outside as 0 (same weights as the warp);
    ``mode="edge"`` clamps coordinates to the raster.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mode == "edge":
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    elif mode != "zero":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    if src.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    out = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            if src.ndim == 3:
                ok = ok[..., None]
            out = out + wy * wx * np.where(ok, vals, 0.0)
    return out
