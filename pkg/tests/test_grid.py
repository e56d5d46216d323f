import colorsys
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from unsupflow import grid


def _png(path, data, mode):
    Image.fromarray(np.asarray(data), mode=mode).save(path)


def test_read_gray_png_scaling(tmp_path):
    p = tmp_path / "g.png"
    _png(p, np.array([[0, 255], [128, 64]], dtype=np.uint8), "L")
    img = grid.read_image(p)
    assert img.shape == (2, 2, 1)
    assert img[:, :, 0].tolist() == [[0.0, 1.0], [128 / 255, 64 / 255]]


def test_read_errors_are_distinct(tmp_path):
    with pytest.raises(grid.MissingRasterError):
        grid.read_image(tmp_path / "missing.png")

    good = tmp_path / "ok.png"
    _png(good, np.zeros((8, 8, 3), dtype=np.uint8), "RGB")
    trunc = tmp_path / "trunc.png"
    trunc.write_bytes(good.read_bytes()[:30])
    with pytest.raises(grid.MalformedRasterError, match="malformed raster"):
        grid.read_image(trunc)

    deep = tmp_path / "deep.png"
    Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(deep)
    with pytest.raises(grid.UnsupportedRasterError):
        grid.read_image(deep)


def test_write_quantisation_rules(tmp_path):
    p = tmp_path / "c.png"
    grid.write_image(np.full((3, 4, 1), 0.5), p)
    assert np.all(np.asarray(Image.open(p)) == 128)
    grid.write_image(np.array([[1.0, -0.2]]), p)
    assert np.asarray(Image.open(p)).tolist() == [[255, 0]]


def test_write_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        grid.write_image(np.zeros((2, 2, 3)), tmp_path / "no" / "such" / "dir.png")


def test_image_roundtrip_within_half_step(tmp_path, rng):
    img = rng.random((17, 13, 3))
    p = tmp_path / "rt.png"
    grid.write_image(img, p)
    back = grid.read_image(p)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / (2 * 255) + 1e-12


def test_flo_single_pixel(tmp_path):
    p = tmp_path / "one.flo"
    p.write_bytes(struct.pack("<fii", 202021.25, 1, 1) + struct.pack("<ff", 2.0, -3.0))
    flow = grid.read_flo(p)
    assert flow.shape == (1, 1, 2)
    assert flow[0, 0].tolist() == [2.0, -3.0]


def test_flo_errors(tmp_path):
    p = tmp_path / "bad.flo"
    p.write_bytes(struct.pack("<fii", 1.0, 1, 1) + b"\0" * 8)
    with pytest.raises(grid.FloFormatError, match="not a flo file"):
        grid.read_flo(p)
    p.write_bytes(struct.pack("<fii", 202021.25, 2, 2) + b"\0" * 8)
    with pytest.raises(grid.FloFormatError, match="size mismatch"):
        grid.read_flo(p)
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        grid.write_flo(bad, tmp_path / "nan.flo")


def test_flo_zero_payload(tmp_path):
    p = tmp_path / "z.flo"
    grid.write_flo(np.zeros((2, 2, 2)), p)
    raw = p.read_bytes()
    assert raw[:12] == struct.pack("<fii", 202021.25, 2, 2)
    assert raw[12:] == struct.pack("<8f", *([0.0] * 8))


def test_flo_layout_is_row_major_interleaved(tmp_path):
    flow = np.arange(12, dtype=np.float64).reshape(2, 3, 2)
    p = tmp_path / "l.flo"
    grid.write_flo(flow, p)
    payload = struct.unpack("<12f", p.read_bytes()[12:])
    assert payload == tuple(float(v) for v in range(12))
    assert struct.unpack("<ii", p.read_bytes()[4:12]) == (3, 2)


finite32 = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)), elements=finite32))
def test_flo_roundtrip_property(tmp_path_factory, flow):
    d = tmp_path_factory.mktemp("flo")
    a, b = d / "a.flo", d / "b.flo"
    grid.write_flo(flow, a)
    back = grid.read_flo(a)
    assert np.array_equal(back.astype(np.float32), flow)
    grid.write_flo(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_colorize_zero_is_white():
    assert np.all(grid.colorize_flow(np.zeros((3, 4, 2))) == 1.0)


def test_colorize_max_magnitude_right_is_red():
    flow = np.zeros((2, 2, 2))
    flow[..., 0] = 2.5
    img = grid.colorize_flow(flow, max_magnitude=2.5)
    assert np.allclose(img, [1.0, 0.0, 0.0])


def test_colorize_matches_direct_hsv_formula(rng):
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    mag = rng.uniform(0, 1, size=64)
    flow = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)[None]
    img = grid.colorize_flow(flow, max_magnitude=1.0)
    for i in range(64):
        hue = (np.arctan2(flow[0, i, 1], flow[0, i, 0]) / (2 * np.pi)) % 1.0
        expected = colorsys.hsv_to_rgb(hue, mag[i], 1.0)
        assert np.allclose(img[0, i], expected, atol=1e-12)


def test_colorize_rotating_field_is_continuous():
    ang = np.linspace(0, 2 * np.pi, 360, endpoint=False)
    flow = np.stack([np.cos(ang), np.sin(ang)], axis=-1)[None]
    img = grid.colorize_flow(flow, max_magnitude=1.0)[0]
    steps = np.abs(np.diff(np.vstack([img, img[:1]]), axis=0)).max()
    assert steps < 0.05


@given(arrays(np.float64, (4, 5, 2), elements=st.floats(-1e3, 1e3)), st.sampled_from(["auto", 0.5, 10.0, 0.0]))
def test_colorize_in_unit_range(flow, mm):
    img = grid.colorize_flow(flow, mm)
    assert img.shape == (4, 5, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_validation_helpers():
    with pytest.raises(ValueError):
        grid.as_image(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        grid.as_flow(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError, match="dimension mismatch"):
        grid.check_same_size(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))
    assert grid.as_image(np.zeros((2, 3))).shape == (2, 3, 1)


def test_area_downsample_and_odd_sizes():
    x = np.arange(16.0).reshape(4, 4)
    assert grid.area_downsample(x).tolist() == [[2.5, 4.5], [10.5, 12.5]]
    odd = grid.area_downsample(np.ones((5, 3, 2)))
    assert odd.shape == (3, 2, 2) and np.allclose(odd, 1.0)


def test_bilinear_upsample_is_adjoint(rng):
    x = rng.normal(size=(3, 4, 2))
    g = rng.normal(size=(6, 8, 2))
    lhs = np.sum(grid.bilinear_upsample2(x) * g)
    rhs = np.sum(x * grid.bilinear_upsample2_adjoint(g))
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_upsample_flow_doubles_values():
    flow = np.full((4, 4, 2), 1.5)
    up = grid.upsample_flow(flow)
    assert up.shape == (8, 8, 2) and np.allclose(up, 3.0)
    assert grid.upsample_flow(flow, (7, 8)).shape == (7, 8, 2)


def test_sample_bilinear_modes(rng):
    src = rng.random((5, 6))
    assert np.allclose(grid.sample_bilinear(src, np.array([2.0]), np.array([3.0])), src[3, 2])
    assert grid.sample_bilinear(src, np.array([-1.0]), np.array([0.0]))[0] == 0.0
    assert grid.sample_bilinear(src, np.array([-1.0]), np.array([0.0]), mode="edge")[0] == src[0, 0]
    with pytest.raises(ValueError):
        grid.sample_bilinear(src, np.zeros(1), np.zeros(1), mode="wrap")
