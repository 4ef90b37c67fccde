import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdiff.errors import ShapeMismatchError
from splatdiff.metrics import SSIM_C1, SSIM_C2, MetricResult, psnr, ssim


def test_psnr_identical_images_capped(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_difference_closed_form():
    a = np.full((20, 20, 3), 0.5)
    b = np.full((20, 20, 3), 0.6)
    # MSE = 0.01 -> 10 log10(1/0.01) = 20 dB
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_brute_force(rng):
    a = rng.uniform(0, 1, (13, 17, 3))
    b = rng.uniform(0, 1, (13, 17, 3))
    total = 0.0
    for i in range(13):
        for j in range(17):
            for k in range(3):
                total += (a[i, j, k] - b[i, j, k]) ** 2
    expected = 10.0 * np.log10(1.0 / (total / (13 * 17 * 3)))
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)


def test_psnr_resolution_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        psnr(rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (9, 8, 3)))


def test_ssim_identical_is_one(rng):
    img = rng.uniform(0, 1, (24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_luminance_closed_form():
    # zero variance and covariance: SSIM = (2xy + C1)/(x^2 + y^2 + C1)
    for x, y in [(0.2, 0.7), (0.0, 1.0), (0.4, 0.45)]:
        a = np.full((16, 16, 3), x)
        b = np.full((16, 16, 3), y)
        expected = (2 * x * y + SSIM_C1) / (x**2 + y**2 + SSIM_C1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_anticorrelated_binary_negative(rng):
    a = (rng.uniform(0, 1, (24, 24)) > 0.5).astype(np.float64)
    a = np.repeat(a[:, :, None], 3, axis=2)
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_window_requirement(rng):
    small = rng.uniform(0, 1, (8, 8, 3))
    with pytest.raises(ShapeMismatchError):
        ssim(small, small)


def test_ssim_matches_direct_windowed_computation(rng):
    # oracle: direct per-window evaluation with an explicit 2D kernel
    a = rng.uniform(0, 1, (16, 18, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ga, gb = a.mean(axis=2), b.mean(axis=2)
    x = np.arange(11) - 5.0
    k1 = np.exp(-0.5 * (x / 1.5) ** 2)
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    vals = []
    for i in range(16 - 10):
        for j in range(18 - 10):
            wa = ga[i:i + 11, j:j + 11]
            wb = gb[i:i + 11, j:j + 11]
            mu_a = (wa * k2).sum()
            mu_b = (wb * k2).sum()
            va = (wa * wa * k2).sum() - mu_a**2
            vb = (wb * wb * k2).sum() - mu_b**2
            cov = (wa * wb * k2).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                        / ((mu_a**2 + mu_b**2 + SSIM_C1) * (va + vb + SSIM_C2)))
    assert ssim(a, b) == pytest.approx(float(np.mean(vals)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (12, 12, 3))
    b = rng.uniform(0, 1, (12, 12, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_metric_result_fields():
    m = MetricResult(psnr=30.0, ssim=0.9)
    assert m.psnr == 30.0 and m.ssim == 0.9
