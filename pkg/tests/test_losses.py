import numpy as np
import pytest
from conftest import textured
from hypothesis import given
from hypothesis import strategies as st

from unsupflow.losses import (
    LossConfig,
    image_pyramid,
    multiscale_loss,
    multiscale_terms,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from unsupflow.penalty import CharbonnierParams
from unsupflow.warp import bilinear_warp


def oracle_photometric(flow, img1, img2, cfg):
    h, w, c = img1.shape
    warped = bilinear_warp(img2, flow).warped
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            x2, y2 = j + flow[i, j, 0], i + flow[i, j, 1]
            inside = 0 <= x2 <= w - 1 and 0 <= y2 <= h - 1
            if cfg.mask_out_of_bounds and not inside:
                continue
            for ch in range(c):
                r = img1[i, j, ch] - warped[i, j, ch]
                total += (r * r + cfg.photo.epsilon ** 2) ** cfg.photo.alpha
                count += 1
    return total / count if cfg.normalize else total


def oracle_smoothness(flow, cfg):
    h, w, _ = flow.shape
    p = cfg.smooth
    total = 0.0
    for ch in range(2):
        for i in range(h):
            for j in range(w):
                if j + 1 < w:
                    d = flow[i, j, ch] - flow[i, j + 1, ch]
                    total += (d * d + p.epsilon ** 2) ** p.alpha
                if i + 1 < h:
                    d = flow[i, j, ch] - flow[i + 1, j, ch]
                    total += (d * d + p.epsilon ** 2) ** p.alpha
    return total / (h * w) if cfg.normalize else total


@pytest.mark.parametrize("mask", [True, False])
@pytest.mark.parametrize("normalize", [True, False])
def test_photometric_matches_oracle(rng, mask, normalize):
    img1, img2 = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    flow = rng.uniform(-3, 3, size=(6, 7, 2))
    cfg = LossConfig(mask_out_of_bounds=mask, normalize=normalize)
    val, _ = photometric_loss(flow, img1, img2, cfg)
    assert val == pytest.approx(oracle_photometric(flow, img1, img2, cfg), rel=1e-12)


@pytest.mark.parametrize("normalize", [True, False])
def test_smoothness_matches_oracle(rng, normalize):
    flow = rng.normal(size=(5, 8, 2))
    cfg = LossConfig(smooth=CharbonnierParams(0.21), normalize=normalize)
    assert smoothness_loss(flow, cfg)[0] == pytest.approx(oracle_smoothness(flow, cfg), rel=1e-12)


def test_perfect_registration_gives_floor_value(rng):
    img = rng.random((8, 8, 3))
    cfg = LossConfig()
    val, grad = photometric_loss(np.zeros((8, 8, 2)), img, img, cfg)
    assert val == pytest.approx(cfg.photo.epsilon ** (2 * cfg.photo.alpha))


def test_constant_flow_has_floor_smoothness(rng):
    flow = np.full((6, 5, 2), 1.3)
    cfg = LossConfig()
    val, grad = smoothness_loss(flow, cfg)
    n_diffs = 2 * (6 * 4 + 5 * 5)
    assert val == pytest.approx(n_diffs * cfg.smooth.epsilon ** (2 * cfg.smooth.alpha) / 30)
    assert np.all(grad == 0)


def test_total_combines_terms(rng):
    img1, img2 = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    flow = rng.normal(size=(6, 6, 2))
    cfg = LossConfig(lam=0.53)
    rep = total_loss(flow, img1, img2, cfg)
    p, gp = photometric_loss(flow, img1, img2, cfg)
    s, gs = smoothness_loss(flow, cfg)
    assert rep.photometric == p and rep.smoothness == s
    assert rep.total == pytest.approx(p + 0.53 * s)
    assert np.allclose(rep.grad_flow, gp + 0.53 * gs)


def test_all_samples_outside_gives_zero(rng):
    img = rng.random((4, 4, 3))
    flow = np.full((4, 4, 2), 10.0)
    val, grad = photometric_loss(flow, img, img, LossConfig())
    assert val == 0.0 and np.all(grad == 0)


def test_shape_errors(rng):
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((4, 4, 2)), rng.random((4, 4, 3)), rng.random((4, 4, 1)), LossConfig())
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((4, 5, 2)), rng.random((4, 4, 3)), rng.random((4, 4, 3)), LossConfig())
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)


@given(st.integers(0, 10_000))
def test_true_integer_shift_minimises_photometric(seed):
    rng = np.random.default_rng(seed)
    base = textured(rng, 28, 28)
    du, dv = (int(v) for v in rng.integers(-3, 4, size=2))
    # img2(x + du, y + dv) = img1(x, y): sample a larger canvas
    img1 = base[4:24, 4:24]
    img2 = base[4 - dv:24 - dv, 4 - du:24 - du]
    cfg = LossConfig()
    losses = {}
    for u in range(-3, 4):
        for v in range(-3, 4):
            flow = np.zeros((20, 20, 2))
            flow[..., 0], flow[..., 1] = u, v
            losses[(u, v)] = photometric_loss(flow, img1, img2, cfg)[0]
    assert min(losses, key=losses.get) == (du, dv)


def test_pyramid_levels(rng):
    img = rng.random((16, 12, 3))
    pyr = image_pyramid(img, 3)
    assert [p.shape for p in pyr] == [(16, 12, 3), (8, 6, 3), (4, 3, 3)]
    assert np.isclose(pyr[2].mean(), img.mean())


def test_multiscale_uses_matching_levels(rng):
    img1, img2 = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    preds = [rng.normal(0, 0.5, size=(16 >> k, 16 >> k, 2)) for k in (3, 2, 1)]
    cfg = LossConfig()
    reports = multiscale_terms(preds, img1, img2, cfg)
    pyr1, pyr2 = image_pyramid(img1, 4), image_pyramid(img2, 4)
    for k, p, rep in zip((3, 2, 1), preds, reports):
        assert rep.total == total_loss(p, pyr1[k], pyr2[k], cfg).total
    value, grads = multiscale_loss(preds, img1, img2, (0.25, 0.5, 1.0), cfg)
    assert value == pytest.approx(sum(w * r.total for w, r in zip((0.25, 0.5, 1.0), reports)))
    assert np.allclose(grads[0], 0.25 * reports[0].grad_flow)


def test_multiscale_rejects_non_dyadic(rng):
    with pytest.raises(ValueError):
        multiscale_terms([np.zeros((5, 5, 2))], rng.random((16, 16, 3)), rng.random((16, 16, 3)), LossConfig())
    with pytest.raises(ValueError):
        multiscale_loss([np.zeros((8, 8, 2))], rng.random((16, 16, 3)), rng.random((16, 16, 3)), (1, 2), LossConfig())
