import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def textured(rng, h, w, channels=3, smooth=1.0):
    """Random texture with some spatial correlation (a light box blur of white noise)."""
    from scipy.ndimage import gaussian_filter

    img = rng.random((h, w, channels))
    if smooth > 0:
        img = gaussian_filter(img, sigma=(smooth, smooth, 0), mode="wrap")
        img = (img - img.min()) / (img.max() - img.min())
    return img


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
