"""Orthonormal Haar pyramid: reconstruction, energy, adjoint, losses."""

import numpy as np
import pytest

from gsmark import wavelet
from gsmark.model import ContractViolation

SIZES = [(16, 16), (32, 32), (17, 23), (15, 16), (33, 31), (11, 30)]


def _pyramid_energy(pyr):
    return sum(float((d ** 2).sum()) for d in pyr.detail_arrays()) \
        + float((pyr.ll ** 2).sum())


def _pad_even(x):
    h, w = x.shape[-2:]
    if h % 2:
        x = np.concatenate([x, x[..., -1:, :]], axis=-2)
    if w % 2:
        x = np.concatenate([x, x[..., :, -1:]], axis=-1)
    return x


def test_perfect_reconstruction_all_sizes(rng):
    for h, w in SIZES:
        for levels in (1, 2, 3):
            img = rng.standard_normal((h, w))
            pyr = wavelet.dwt2(img, levels)
            rec = wavelet.idwt2(pyr)
            assert np.abs(rec - img).max() <= 1e-9, (h, w, levels)


def test_parseval_even_sizes(rng):
    for h, w in [(16, 16), (32, 32), (64, 64), (8, 24)]:
        for levels in (1, 2, 3):
            img = rng.standard_normal((h, w))
            pyr = wavelet.dwt2(img, levels)
            assert abs(_pyramid_energy(pyr) - (img ** 2).sum()) <= 1e-9


def test_parseval_odd_sizes_vs_padded(rng):
    # With edge replication the analysis is orthonormal on the padded
    # signal: one level's coefficient energy equals the even-padded
    # image energy exactly.
    for h, w in [(17, 23), (15, 16), (33, 31)]:
        img = rng.standard_normal((h, w))
        pyr = wavelet.dwt2(img, 1)
        padded = _pad_even(img)
        assert abs(_pyramid_energy(pyr) - (padded ** 2).sum()) <= 1e-9


def test_constant_image_closed_forms():
    c = 0.37
    img = np.full((8, 8), c)
    pyr = wavelet.dwt2(img, 1)
    for d in pyr.detail_arrays():
        assert np.all(d == 0.0)     # exact: (c - c) / sqrt(2) is 0.0
    assert np.abs(pyr.ll - 2.0 * c).max() <= 1e-12
    # LL-only pyramid of a constant synthesizes back to the constant.
    rec = wavelet.idwt2(pyr)
    assert np.abs(rec - c).max() <= 1e-12


def test_hand_worked_2x2_haar():
    a, b, c, d = 1.0, 2.0, 4.0, 8.0
    pyr = wavelet.dwt2(np.array([[a, b], [c, d]]), 1)
    lh, hl, hh = pyr.details[0]
    assert np.isclose(pyr.ll[0, 0], (a + b + c + d) / 2, atol=1e-12)
    assert np.isclose(lh[0, 0], (a + b - c - d) / 2, atol=1e-12)
    assert np.isclose(hl[0, 0], (a - b + c - d) / 2, atol=1e-12)
    assert np.isclose(hh[0, 0], (a - b - c + d) / 2, atol=1e-12)


def test_single_pixel_impulse(rng):
    img = np.zeros((16, 16))
    img[int(rng.integers(16)), int(rng.integers(16))] = 1.0
    rec = wavelet.idwt2(wavelet.dwt2(img, 3))
    assert np.abs(rec - img).max() <= 1e-9


def test_zero_pyramid_synthesizes_zero(rng):
    pyr = wavelet.dwt2(rng.standard_normal((16, 16)), 2)
    zero = wavelet.SubbandPyramid(
        levels=pyr.levels,
        details=[tuple(np.zeros_like(b) for b in t) for t in pyr.details],
        ll=np.zeros_like(pyr.ll), shapes=list(pyr.shapes))
    assert np.all(wavelet.idwt2(zero) == 0.0)


def test_analysis_adjoint_dot_product(rng):
    for h, w in [(16, 16), (17, 23)]:
        img = rng.standard_normal((h, w))
        pyr = wavelet.dwt2(img, 2)
        cot = wavelet.SubbandPyramid(
            levels=pyr.levels,
            details=[tuple(rng.standard_normal(b.shape) for b in t)
                     for t in pyr.details],
            ll=rng.standard_normal(pyr.ll.shape), shapes=list(pyr.shapes))
        lhs = sum(float((a * b).sum()) for a, b in
                  zip(pyr.detail_arrays(), cot.detail_arrays()))
        lhs += float((pyr.ll * cot.ll).sum())
        rhs = float((img * wavelet.dwt2_adjoint(cot)).sum())
        assert np.isclose(lhs, rhs, rtol=1e-12)


def test_depth_and_validation_errors(rng):
    with pytest.raises(ContractViolation):
        wavelet.dwt2(np.zeros((4, 4)), 0)
    with pytest.raises(ContractViolation):
        wavelet.dwt2(np.zeros((4, 4)), 4)
    with pytest.raises(ContractViolation):
        wavelet.dwt2(np.full((4, 4), np.nan), 1)
    pyr = wavelet.dwt2(rng.standard_normal((8, 8)), 1)
    pyr.details[0] = tuple(np.zeros((3, 3)) for _ in range(3))
    with pytest.raises(ContractViolation):
        wavelet.idwt2(pyr)


def test_highfreq_loss_basics(rng):
    img = rng.random((16, 16, 3))
    assert wavelet.highfreq_loss(img, img, 2) == 0.0
    # A constant offset lives entirely in LL.
    assert wavelet.highfreq_loss(img + 0.1, img, 2) <= 1e-12
    other = rng.random((16, 16, 3))
    assert wavelet.highfreq_loss(img, other, 2) > 0


def test_lowfreq_loss_constant_gain(rng):
    img = rng.random((16, 16, 3))
    c = 0.05
    for levels in (1, 2, 3):
        val = wavelet.lowfreq_loss(img + c, img, levels)
        assert np.isclose(val, (2.0 ** levels) * c, rtol=1e-9)


def test_loss_gradients_match_fd(rng):
    img = rng.random((12, 12, 3))
    ref = rng.random((12, 12, 3))
    for fn in (wavelet.highfreq_loss_grad, wavelet.lowfreq_loss_grad):
        val, grad = fn(img, ref, 2)
        h = 1e-6
        for _ in range(6):
            y, x, ch = rng.integers(12), rng.integers(12), rng.integers(3)
            up = img.copy()
            up[y, x, ch] += h
            dn = img.copy()
            dn[y, x, ch] -= h
            fd = (fn(up, ref, 2)[0] - fn(dn, ref, 2)[0]) / (2 * h)
            assert abs(fd - grad[y, x, ch]) < 1e-6


def test_loss_shape_mismatch(rng):
    with pytest.raises(ContractViolation):
        wavelet.highfreq_loss(np.zeros((8, 8)), np.zeros((8, 9)), 1)
