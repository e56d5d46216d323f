"""Finite-difference checks of every analytic gradient in the package.

Each check compares an analytic gradient with central differences in
float64 and reports the relative error
``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import LossConfig, multiscale_loss, photometric_loss, smoothness_loss, total_loss
from .net import (
    ConvLayerSpec,
    MiniFlowNet,
    MiniFlowNetSpec,
    conv_backward,
    conv_forward,
    leaky_relu_bwd,
    leaky_relu_fwd,
    upsample_flow_t,
    upsample_flow_t_adjoint,
)
from .penalty import CharbonnierParams, rho, rho_prime
from .warp import bilinear_warp, warp_backward

STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tolerance)


def rel_error(analytic, numeric) -> float:
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (all coordinates, or the flat indices ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size) if coords is None else np.zeros(len(coords))
    for j, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        out[i if coords is None else j] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if coords is None else out


def _fractional_flow(rng, h, w, span=2.0):
    """Flow whose sampling coordinates stay at least 0.1 px from grid lines and inside the image."""
    rows, cols = np.mgrid[0:h, 0:w]
    flow = np.floor(rng.uniform(-span, span, size=(h, w, 2))) + rng.uniform(0.1, 0.9, size=(h, w, 2))
    x2 = cols + flow[..., 0]
    y2 = rows + flow[..., 1]
    inside = (x2 > 0) & (x2 < w - 1) & (y2 > 0) & (y2 < h - 1)
    # send offenders to an interior, off-grid sample
    flow[..., 0] = np.where(inside, flow[..., 0], (w - 1) / 2 + 0.37 - cols)
    flow[..., 1] = np.where(inside, flow[..., 1], (h - 1) / 2 + 0.41 - rows)
    return flow


# ---------------------------------------------------------------------------
# individual checks; each returns a relative error
# ---------------------------------------------------------------------------

def check_penalty(rng) -> float:
    worst = 0.0
    for alpha in (0.21, 0.25, 0.37, 0.38, 0.5, 1.0):
        p = CharbonnierParams(alpha=alpha)
        x = np.concatenate([rng.normal(0, 1, 50), rng.normal(0, 0.01, 10)])
        x = x[np.abs(x) > 1e-4]
        num = np.array([(rho(xi + STEP * 1e-2, p) - rho(xi - STEP * 1e-2, p)) / (2e-2 * STEP) for xi in x])
        worst = max(worst, rel_error(rho_prime(x, p), num))
    return worst


def check_warp_flow(rng) -> float:
    src = rng.random((8, 9, 3))
    flow = _fractional_flow(rng, 8, 9)
    up = rng.normal(size=src.shape)
    g_flow, _ = warp_backward(src, flow, up)
    num = numeric_grad(lambda f: float(np.sum(up * bilinear_warp(src, f).warped)), flow)
    return rel_error(g_flow, num)


def check_warp_source(rng) -> float:
    src = rng.random((7, 8, 3))
    flow = rng.uniform(-3, 3, size=(7, 8, 2))
    up = rng.normal(size=src.shape)
    _, g_src = warp_backward(src, flow, up)
    num = numeric_grad(lambda s: float(np.sum(up * bilinear_warp(s, flow).warped)), src)
    return rel_error(g_src, num)


def _loss_case(rng, h=10, w=11):
    img1 = rng.random((h, w, 3))
    img2 = rng.random((h, w, 3))
    flow = _fractional_flow(rng, h, w)
    return img1, img2, flow


def check_photometric(rng) -> float:
    img1, img2, flow = _loss_case(rng)
    cfg = LossConfig()
    _, g = photometric_loss(flow, img1, img2, cfg)
    num = numeric_grad(lambda f: photometric_loss(f, img1, img2, cfg)[0], flow)
    return rel_error(g, num)


def check_smoothness(rng) -> float:
    flow = rng.normal(0, 1.5, size=(9, 10, 2))
    worst = 0.0
    for cfg in (LossConfig(), LossConfig(smooth=CharbonnierParams(0.21)), LossConfig(normalize=False)):
        _, g = smoothness_loss(flow, cfg)
        num = numeric_grad(lambda f: smoothness_loss(f, cfg)[0], flow)
        worst = max(worst, rel_error(g, num))
    return worst


def check_total(rng) -> float:
    img1, img2, flow = _loss_case(rng)
    cfg = LossConfig(lam=0.53, photo=CharbonnierParams(0.38), smooth=CharbonnierParams(0.21))
    g = total_loss(flow, img1, img2, cfg).grad_flow
    num = numeric_grad(lambda f: total_loss(f, img1, img2, cfg).total, flow)
    return rel_error(g, num)


def check_multiscale(rng) -> float:
    img1 = rng.random((16, 16, 3))
    img2 = rng.random((16, 16, 3))
    preds = [_fractional_flow(rng, 16 >> k, 16 >> k, span=1.0) for k in (2, 1)]
    weights = (0.5, 1.0)
    cfg = LossConfig()
    _, grads = multiscale_loss(preds, img1, img2, weights, cfg)
    errs = []
    for i in range(len(preds)):
        def f(p, i=i):
            ps = list(preds)
            ps[i] = p
            return multiscale_loss(ps, img1, img2, weights, cfg)[0]
        errs.append(rel_error(grads[i], numeric_grad(f, preds[i])))
    return max(errs)


def _conv_check(rng, spec: ConvLayerSpec, hw=(6, 5), n=2) -> float:
    h, w = hw
    x = rng.normal(size=(n, spec.in_channels, h, w))
    wts = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    y, cache = conv_forward(x, spec, wts, b)
    up = rng.normal(size=y.shape)
    gx, gw, gb = conv_backward(cache, spec, wts, up)
    errs = [
        rel_error(gx, numeric_grad(lambda v: float(np.sum(up * conv_forward(v, spec, wts, b)[0])), x)),
        rel_error(gw, numeric_grad(lambda v: float(np.sum(up * conv_forward(x, spec, v, b)[0])), wts)),
        rel_error(gb, numeric_grad(lambda v: float(np.sum(up * conv_forward(x, spec, wts, v)[0])), b)),
    ]
    return max(errs)


def check_conv_stride1(rng) -> float:
    return _conv_check(rng, ConvLayerSpec("c", 3, 4, kernel=3, stride=1))


def check_conv_stride2(rng) -> float:
    return max(_conv_check(rng, ConvLayerSpec("c", 3, 4, kernel=5, stride=2), hw=(8, 6)),
               _conv_check(rng, ConvLayerSpec("c", 2, 3, kernel=3, stride=2), hw=(7, 6)))


def check_deconv(rng) -> float:
    return max(_conv_check(rng, ConvLayerSpec("d", 4, 3, kernel=3, stride=2, transposed=True), hw=(3, 4)),
               _conv_check(rng, ConvLayerSpec("d", 2, 3, kernel=5, stride=2, transposed=True), hw=(4, 3)))


def check_leaky_relu(rng) -> float:
    x = rng.normal(size=(2, 3, 4, 4))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    up = rng.normal(size=x.shape)
    num = numeric_grad(lambda v: float(np.sum(up * leaky_relu_fwd(v))), x)
    return rel_error(leaky_relu_bwd(x, up), num)


def check_flow_upsample(rng) -> float:
    f = rng.normal(size=(2, 2, 3, 4))
    up = rng.normal(size=(2, 2, 6, 8))
    num = numeric_grad(lambda v: float(np.sum(up * upsample_flow_t(v))), f)
    return rel_error(upsample_flow_t_adjoint(up), num)


def check_network(rng, n_coords: int = 60) -> float:
    """Whole-network parameter gradient on a random projection of all three outputs."""
    net = MiniFlowNet(MiniFlowNetSpec(), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    # perturb so biases and flow heads are not at their special initial values
    net.params += rng.normal(0, 0.02, size=net.n_params)
    x = rng.normal(size=(2, 6, 16, 16))
    outs = net.forward(x)
    projections = [rng.normal(size=o.shape) for o in outs]
    g = net.backward(projections)

    def objective(p):
        net.params[:] = p
        val = sum(float(np.sum(r * o)) for r, o in zip(projections, net.forward(x)))
        net._cache = None
        return val

    base = net.params.copy()
    coords = rng.choice(net.n_params, size=min(n_coords, net.n_params), replace=False)
    num = numeric_grad(objective, base, h=1e-5, coords=coords)
    net.params[:] = base
    return rel_error(g[coords], num)


# (module, name, function, tolerance)
CHECKS = [
    ("penalty", "charbonnier derivative", check_penalty, 1e-5),
    ("warp", "d warp / d flow (off-grid)", check_warp_flow, 1e-4),
    ("warp", "d warp / d source", check_warp_source, 1e-4),
    ("losses", "photometric", check_photometric, 1e-4),
    ("losses", "smoothness", check_smoothness, 1e-4),
    ("losses", "total", check_total, 1e-4),
    ("losses", "multiscale", check_multiscale, 1e-4),
    ("net", "conv stride 1", check_conv_stride1, 1e-4),
    ("net", "conv stride 2", check_conv_stride2, 1e-4),
    ("net", "transposed conv", check_deconv, 1e-4),
    ("net", "leaky relu", check_leaky_relu, 1e-4),
    ("net", "flow upsampling", check_flow_upsample, 1e-4),
    ("net", "whole network parameters", check_network, 1e-3),
]

MODULES = tuple(dict.fromkeys(m for m, *_ in CHECKS))


def run_suite(module: str = "all", seed: int = 0) -> list[CheckResult]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from all, {', '.join(MODULES)}")
    results = []
    for i, (mod, name, fn, tol) in enumerate(CHECKS):
        if module not in ("all", mod):
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        err = fn(rng)
        results.append(CheckResult(mod, name, err, tol, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'module':<8} {'check':<28} {'rel error':>10} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.module:<8} {r.name:<28} {r.rel_error:10.2e} {r.tolerance:8.0e}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
