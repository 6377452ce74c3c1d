"""Multi-level 2D orthonormal Haar transform and subband losses.

Operates on arrays shaped (..., H, W); RGB images are handled by the loss
helpers as (C, H, W).  Odd extents are edge-replicated to even length, and
the synthesis side drops the padded sample, so reconstruction is exact for
every size.  The analysis adjoint (used for loss gradients) folds the
padded-sample gradient back onto the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gsmark.model import ContractViolation

_SQRT2 = np.sqrt(2.0)


def _split(x, axis):
    """One orthonormal Haar step along ``axis`` with replicate padding."""
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    if n % 2:
        x = np.concatenate([x, x[..., -1:]], axis=-1)
    lo = (x[..., ::2] + x[..., 1::2]) / _SQRT2
    hi = (x[..., ::2] - x[..., 1::2]) / _SQRT2
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis)


def _merge(lo, hi, n_out, axis, fold=False):
    """Inverse (or adjoint, with ``fold``) of :func:`_split`."""
    lo = np.moveaxis(lo, axis, -1)
    hi = np.moveaxis(hi, axis, -1)
    even = (lo + hi) / _SQRT2
    odd = (lo - hi) / _SQRT2
    out = np.empty(lo.shape[:-1] + (2 * lo.shape[-1],), dtype=lo.dtype)
    out[..., ::2] = even
    out[..., 1::2] = odd
    if out.shape[-1] != n_out:
        if fold:
            out[..., n_out - 1] += out[..., n_out]
        out = out[..., :n_out]
    return np.moveaxis(out, -1, axis)


@dataclass
class SubbandPyramid:
    """Haar analysis result: finest-to-coarsest detail triples plus the
    coarsest approximation."""

    levels: int
    details: list      # [(LH, HL, HH)] per level, index 0 = finest
    ll: np.ndarray     # top-level approximation
    shapes: list       # (H, W) input extents per level
    family: str = "haar"

    def detail_arrays(self):
        for triple in self.details:
            yield from triple


def _check_depth(shape, levels):
    h, w = shape[-2], shape[-1]
    for _ in range(levels):
        if h < 2 or w < 2:
            raise ContractViolation(
                f"image extent {shape[-2:]} too small for {levels} levels")
        h, w = (h + 1) // 2, (w + 1) // 2


def dwt2(image: np.ndarray, levels: int) -> SubbandPyramid:
    """Multi-level orthonormal Haar analysis of (..., H, W) data."""
    if levels < 1:
        raise ContractViolation("levels must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ContractViolation("image must be finite")
    _check_depth(image.shape, levels)

    details = []
    shapes = []
    x = image
    for _ in range(levels):
        shapes.append((x.shape[-2], x.shape[-1]))
        lo_x, hi_x = _split(x, axis=-1)
        ll, lh = _split(lo_x, axis=-2)
        hl, hh = _split(hi_x, axis=-2)
        details.append((lh, hl, hh))
        x = ll
    return SubbandPyramid(levels=levels, details=details, ll=x, shapes=shapes)


def idwt2(pyramid: SubbandPyramid) -> np.ndarray:
    """Exact synthesis inverse of :func:`dwt2`."""
    x = pyramid.ll
    for (lh, hl, hh), (h, w) in zip(reversed(pyramid.details),
                                    reversed(pyramid.shapes)):
        if lh.shape != x.shape:
            raise ContractViolation("inconsistent pyramid dimensions")
        lo_x = _merge(x, lh, h, axis=-2)
        hi_x = _merge(hl, hh, h, axis=-2)
        x = _merge(lo_x, hi_x, w, axis=-1)
    return x


def dwt2_adjoint(pyramid: SubbandPyramid) -> np.ndarray:
    """Adjoint of the analysis operator (equals the inverse except that
    replicate-padding gradients fold onto the edge sample)."""
    x = pyramid.ll
    for (lh, hl, hh), (h, w) in zip(reversed(pyramid.details),
                                    reversed(pyramid.shapes)):
        lo_x = _merge(x, lh, h, axis=-2, fold=True)
        hi_x = _merge(hl, hh, h, axis=-2, fold=True)
        x = _merge(lo_x, hi_x, w, axis=-1, fold=True)
    return x


def _zero_pyramid_like(pyr: SubbandPyramid) -> SubbandPyramid:
    return SubbandPyramid(
        levels=pyr.levels,
        details=[tuple(np.zeros_like(b) for b in t) for t in pyr.details],
        ll=np.zeros_like(pyr.ll), shapes=list(pyr.shapes),
        family=pyr.family)


def _as_planes(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.transpose(2, 0, 1), True
    return img, False


def highfreq_loss(img, ref, levels: int) -> float:
    """Mean L1 distance over all LH/HL/HH coefficients, all levels."""
    return highfreq_loss_grad(img, ref, levels)[0]


def highfreq_loss_grad(img, ref, levels: int):
    """High-frequency subband loss and its gradient w.r.t. ``img``."""
    x, chans = _as_planes(img)
    r, _ = _as_planes(ref)
    if x.shape != r.shape:
        raise ContractViolation("image shapes differ")
    px = dwt2(x, levels)
    pr = dwt2(r, levels)
    diffs = [a - b for a, b in zip(px.detail_arrays(), pr.detail_arrays())]
    count = sum(d.size for d in diffs)
    value = sum(np.abs(d).sum() for d in diffs) / count

    gpyr = _zero_pyramid_like(px)
    k = 0
    for lev in range(levels):
        triple = []
        for _ in range(3):
            triple.append(np.sign(diffs[k]) / count)
            k += 1
        gpyr.details[lev] = tuple(triple)
    grad = dwt2_adjoint(gpyr)
    if chans:
        grad = grad.transpose(1, 2, 0)
    return float(value), grad


def lowfreq_loss(img, ref, levels: int) -> float:
    """Mean L1 distance over top-level LL coefficients."""
    return lowfreq_loss_grad(img, ref, levels)[0]


def lowfreq_loss_grad(img, ref, levels: int):
    x, chans = _as_planes(img)
    r, _ = _as_planes(ref)
    if x.shape != r.shape:
        raise ContractViolation("image shapes differ")
    px = dwt2(x, levels)
    pr = dwt2(r, levels)
    diff = px.ll - pr.ll
    value = np.abs(diff).mean()

    gpyr = _zero_pyramid_like(px)
    gpyr.ll = np.sign(diff) / diff.size
    grad = dwt2_adjoint(gpyr)
    if chans:
        grad = grad.transpose(1, 2, 0)
    return float(value), grad
