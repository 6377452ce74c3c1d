"""Fidelity metrics against closed forms and the scikit-image oracle."""

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gsmark import metrics
from gsmark.model import ContractViolation


def test_psnr_formula_oracle(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    mse = np.mean((a - b) ** 2)
    assert np.isclose(metrics.psnr(a, b), -10 * np.log10(mse), atol=1e-9)


def test_psnr_identical_and_offset(rng):
    a = rng.random((8, 8, 3))
    assert metrics.psnr(a, a) == metrics.PSNR_CAP
    assert np.isclose(metrics.psnr(a + 0.1, a), 20.0, atol=1e-9)


def test_psnr_symmetry(rng):
    a = rng.random((8, 8, 3))
    b = rng.random((8, 8, 3))
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    with pytest.raises(ContractViolation):
        metrics.psnr(a, b[:4])


def test_ssim_identical_and_symmetry(rng):
    a = rng.random((24, 24, 3))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert np.isclose(metrics.ssim(a, a), 1.0, atol=1e-12)
    assert np.isclose(metrics.ssim(a, b), metrics.ssim(b, a), atol=1e-12)


def test_ssim_matches_skimage(rng):
    for _ in range(3):
        a = rng.random((32, 32, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        want = structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, channel_axis=2)
        assert np.isclose(metrics.ssim(a, b), want, atol=1e-7)


def test_ssim_window_too_small():
    with pytest.raises(ContractViolation):
        metrics.ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ContractViolation):
        metrics.ssim(np.zeros((16, 16)), np.zeros((16, 17)))


def test_ms_ssim_identical(rng):
    a = rng.random((32, 32, 3))
    assert np.isclose(metrics.ms_ssim(a, a), 1.0, atol=1e-9)


def test_ms_ssim_grad_matches_fd(rng):
    a = rng.random((24, 24))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    val, grad = metrics.ms_ssim_grad(a, b)
    h = 1e-5
    for _ in range(8):
        y, x = int(rng.integers(24)), int(rng.integers(24))
        up = a.copy()
        up[y, x] += h
        dn = a.copy()
        dn[y, x] -= h
        fd = (metrics.ms_ssim(up, b) - metrics.ms_ssim(dn, b)) / (2 * h)
        denom = max(abs(fd), abs(grad[y, x]), 1e-6)
        assert abs(fd - grad[y, x]) / denom < 1e-4


def test_ms_ssim_grad_color_shape(rng):
    a = rng.random((24, 24, 3))
    b = rng.random((24, 24, 3))
    val, grad = metrics.ms_ssim_grad(a, b)
    assert grad.shape == a.shape
    assert -1.0 <= val <= 1.0
