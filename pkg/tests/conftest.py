import numpy as np
import pytest
from scipy import ndimage

from lesionkit.lesion_metrics import LesionPRC


def random_blob_mask(rng, shape, density=0.04, smooth=0.8):
    """Binary mask of a few irregular blobs (thresholded smoothed noise)."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), smooth)
    cut = np.quantile(field, 1.0 - density)
    return (field > cut).astype(np.uint8)


def random_prob_map(rng, shape, smooth=1.0):
    """Smooth probability field in (0, 1) with plenty of distinct values."""
    field = ndimage.gaussian_filter(rng.standard_normal(shape), smooth)
    field = (field - field.mean()) / (field.std() + 1e-12)
    return (1.0 / (1.0 + np.exp(-2.5 * field))).astype(np.float32)


def assert_curve_sane(curve: LesionPRC):
    """Recall never increases with the threshold and tp + fn is constant."""
    assert np.all(np.diff(curve.thresholds) > 0)
    total = curve.tp + curve.fn
    assert np.all(total == total[0])
    assert np.all(np.diff(curve.tp) <= 0)
    r = curve.recall
    assert np.all(np.diff(r) <= 1e-15)
    assert np.all((curve.precision >= 0) & (curve.precision <= 1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
