"""Contribution-based pruning of Gaussians that never matter on screen.

A Gaussian's contribution is its accumulated compositing weight
(sum of alpha * transmittance over pixels), maximized over the camera
set.  Points below the threshold in every view are dropped.
"""

from __future__ import annotations

import warnings

import numpy as np

from gsmark.model import GaussianModel
from gsmark.render import render


def contribution_scores(model: GaussianModel, cameras,
                        threads: int = 1) -> np.ndarray:
    """Max-over-views accumulated compositing weight per Gaussian."""
    best = np.zeros(len(model))
    for cam in cameras:
        out = render(model, cam, threads=threads)
        best = np.maximum(best, out.weight_sum)
    return best


def prune_by_contribution(model: GaussianModel, cameras,
                          threshold: float = 1e-8, threads: int = 1):
    """Remove Gaussians whose best-view contribution is below threshold.

    Returns (pruned model, kept original indices).  Idempotent in
    practice: removing near-invisible points only raises the remaining
    transmittances, so survivor scores cannot drop below threshold.
    """
    scores = contribution_scores(model, cameras, threads=threads)
    keep = np.flatnonzero(scores >= threshold)
    if keep.size == 0:
        warnings.warn("pruning would remove every Gaussian; keeping all")
        return model.copy(), np.arange(len(model))
    if keep.size == len(model):
        return model.copy(), keep
    return model.subset(keep), keep
