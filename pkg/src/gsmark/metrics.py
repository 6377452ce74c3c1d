"""Image fidelity metrics: PSNR, single-scale SSIM, and a multi-scale
SSIM with an analytic gradient for use as a perceptual training loss.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), stability
constants K1=0.01 and K2=0.03 at unit dynamic range, valid windows only
(no padding), averaged over color channels.  The multi-scale variant
downsamples by average pooling and renormalizes the canonical scale
weights to however many scales the image size allows.
"""

from __future__ import annotations

import numpy as np

from gsmark.model import ContractViolation

_K1 = 0.01
_K2 = 0.03
_WIN = 11
_SIGMA = 1.5
_MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
PSNR_CAP = 99.0


def _window() -> np.ndarray:
    xs = np.arange(_WIN, dtype=np.float64) - (_WIN - 1) / 2.0
    g = np.exp(-0.5 * (xs / _SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_W2D = _window()


def psnr(img: np.ndarray, ref: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio at unit dynamic range, capped for
    (near-)identical images."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ContractViolation("image shapes differ")
    mse = np.mean((img - ref) ** 2)
    if mse <= 0:
        return cap
    return float(min(cap, -10.0 * np.log10(mse)))


def _valid_correlate(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2D 'valid' correlation of (H, W) with (_WIN, _WIN)."""
    h, w = plane.shape
    kh, kw = kernel.shape
    strides = plane.strides
    windows = np.lib.stride_tricks.as_strided(
        plane, shape=(h - kh + 1, w - kw + 1, kh, kw),
        strides=strides + strides, writeable=False)
    return np.einsum("ijkl,kl->ij", windows, kernel)


def _valid_correlate_adjoint(grad: np.ndarray, kernel: np.ndarray,
                             h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_valid_correlate`: full convolution scatter."""
    out = np.zeros((h, w))
    gh, gw = grad.shape
    for dy in range(kernel.shape[0]):
        for dx in range(kernel.shape[1]):
            out[dy:dy + gh, dx:dx + gw] += kernel[dy, dx] * grad
    return out


def _ssim_plane(x: np.ndarray, y: np.ndarray, grad: bool):
    """Per-plane SSIM mean (and luminance/contrast parts for MS-SSIM)
    with optional gradient w.r.t. ``x``."""
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    mu_x = _valid_correlate(x, _W2D)
    mu_y = _valid_correlate(y, _W2D)
    xx = _valid_correlate(x * x, _W2D)
    yy = _valid_correlate(y * y, _W2D)
    xy = _valid_correlate(x * y, _W2D)
    var_x = xx - mu_x ** 2
    var_y = yy - mu_y ** 2
    cov = xy - mu_x * mu_y

    l_num = 2 * mu_x * mu_y + c1
    l_den = mu_x ** 2 + mu_y ** 2 + c1
    cs_num = 2 * cov + c2
    cs_den = var_x + var_y + c2
    lum = l_num / l_den
    cs = cs_num / cs_den
    ssim_map = lum * cs

    if not grad:
        return float(ssim_map.mean()), float(cs.mean()), None, None

    n = ssim_map.size
    h, w = x.shape
    # d ssim / d mu_x, var_x, cov per window
    d_lum_dmu = (2 * mu_y * l_den - 2 * mu_x * l_num) / l_den ** 2
    d_ssim_dmu = d_lum_dmu * cs
    d_cs_dvar = -cs_num / cs_den ** 2
    d_cs_dcov = 2.0 / cs_den
    d_ssim_dvar = lum * d_cs_dvar
    d_ssim_dcov = lum * d_cs_dcov

    # Chain through mu_x = W*x, var_x = W*(x^2) - mu_x^2,
    # cov = W*(x y) - mu_x mu_y; all correlations share the adjoint.
    g_mu = (d_ssim_dmu - 2 * mu_x * d_ssim_dvar
            - mu_y * d_ssim_dcov) / n
    g_xx = d_ssim_dvar / n
    g_xy = d_ssim_dcov / n
    grad_x = (_valid_correlate_adjoint(g_mu, _W2D, h, w)
              + 2 * x * _valid_correlate_adjoint(g_xx, _W2D, h, w)
              + y * _valid_correlate_adjoint(g_xy, _W2D, h, w))

    # Same decomposition for the contrast-structure term alone.
    gc_mu = (-2 * mu_x * d_cs_dvar - mu_y * d_cs_dcov) / n
    gc_xx = d_cs_dvar / n
    gc_xy = d_cs_dcov / n
    grad_cs = (_valid_correlate_adjoint(gc_mu, _W2D, h, w)
               + 2 * x * _valid_correlate_adjoint(gc_xx, _W2D, h, w)
               + y * _valid_correlate_adjoint(gc_xy, _W2D, h, w))
    return float(ssim_map.mean()), float(cs.mean()), grad_x, grad_cs


def _planes(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    return img.transpose(2, 0, 1)


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    """Channel-averaged single-scale structural similarity."""
    xs, ys = _planes(img), _planes(ref)
    if xs.shape != ys.shape:
        raise ContractViolation("image shapes differ")
    if xs.shape[-1] < _WIN or xs.shape[-2] < _WIN:
        raise ContractViolation("image smaller than the SSIM window")
    return float(np.mean([_ssim_plane(x, y, grad=False)[0]
                          for x, y in zip(xs, ys)]))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    return x[:h - h % 2, :w - w % 2].reshape(h // 2, 2, w // 2, 2) \
        .mean(axis=(1, 3))


def _avg_pool2_adjoint(grad: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w))
    gh, gw = grad.shape
    spread = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0
    out[:2 * gh, :2 * gw] = spread
    return out


def _usable_scales(h: int, w: int, requested: int) -> int:
    scales = 0
    while scales < requested and min(h, w) >= _WIN:
        scales += 1
        h, w = h // 2, w // 2
    if scales == 0:
        raise ContractViolation("image smaller than the SSIM window")
    return scales


def ms_ssim(img: np.ndarray, ref: np.ndarray, scales: int = 3) -> float:
    return ms_ssim_grad(img, ref, scales)[0]


def ms_ssim_grad(img: np.ndarray, ref: np.ndarray, scales: int = 3):
    """Multi-scale SSIM and its gradient w.r.t. ``img``.

    Value is prod_s term_s^w_s with contrast-structure terms at the finer
    scales and the full SSIM at the coarsest, weights renormalized over
    the usable scales.  Terms are floored at a small epsilon so the log
    derivative stays finite.
    """
    xs, ys = _planes(img), _planes(ref)
    if xs.shape != ys.shape:
        raise ContractViolation("image shapes differ")
    n_scales = _usable_scales(xs.shape[-2], xs.shape[-1], scales)
    weights = _MS_WEIGHTS[:n_scales]
    weights = weights / weights.sum()
    eps = 1e-9

    values = []
    grads = np.zeros_like(xs)
    for c in range(xs.shape[0]):
        x, y = xs[c], ys[c]
        terms = []
        term_grads = []   # gradient of each term w.r.t. that scale's x
        shapes = []
        for s in range(n_scales):
            shapes.append(x.shape)
            mean_ssim, mean_cs, g_ssim, g_cs = _ssim_plane(x, y, grad=True)
            if s == n_scales - 1:
                terms.append(mean_ssim)
                term_grads.append(g_ssim)
            else:
                terms.append(mean_cs)
                term_grads.append(g_cs)
                x = _avg_pool2(x)
                y = _avg_pool2(y)
        terms = np.maximum(np.asarray(terms), eps)
        value = float(np.prod(terms ** weights))
        values.append(value)

        # d value / d term_s = value * w_s / term_s, then pull each term's
        # gradient back through the pooling chain to full resolution.
        for s in range(n_scales - 1, -1, -1):
            g = value * weights[s] / terms[s] * term_grads[s]
            for t in range(s - 1, -1, -1):
                g = _avg_pool2_adjoint(g, *shapes[t])
            grads[c] += g

    value = float(np.mean(values))
    grad = grads / xs.shape[0]
    if np.asarray(img).ndim == 2:
        return value, grad[0]
    return value, grad.transpose(1, 2, 0)
