"""Representation-native per-Gaussian scoring (geometry / appearance /
redundancy experts) and evidence packaging.

All features read only native Gaussian parameters, never rendered pixels,
so they are view-independent by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from gsmark.config import ExpertConfig
from gsmark.model import ContractViolation, GaussianModel


@dataclass
class Neighborhood:
    indices: np.ndarray    # (N, k)
    distances: np.ndarray  # (N, k), ascending per row


@dataclass
class FeatureBundle:
    """Expert features plus the raw per-term quantities the selection and
    masking stages reuse."""

    z: np.ndarray          # (3, N) in [0, 1]
    iso: np.ndarray        # (N,)
    rotcons: np.ndarray    # (N,)
    footprint: np.ndarray  # (N,) geometric-mean scale
    rho_hf: np.ndarray     # (N,) AC energy ratio
    gate: np.ndarray       # (N,) double-sided opacity gate
    bandpass: np.ndarray   # (N,) DC-strength band-pass
    dc_norm: np.ndarray    # (N,) ||h0||
    overlap: np.ndarray    # (N, k) neighbor overlap weights w_ij
    redundancy_raw: np.ndarray  # (N,) pre-normalization z3 score


@dataclass
class EvidencePackage:
    U: np.ndarray  # (3, N) uncertainty in [0, 1]
    S: np.ndarray  # (3, N) quality in [0, 1]


def quantile_norm(x: np.ndarray, q_lo: float = 0.02,
                  q_hi: float = 0.98) -> np.ndarray:
    """Quantile min-max normalization with clipping to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.quantile(x, [q_lo, q_hi])
    if hi - lo < 1e-12:
        return np.full_like(x, 0.5)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def knn(positions: np.ndarray, k: int) -> Neighborhood:
    """Exact k nearest Euclidean neighbors, self excluded, ties broken by
    lower index."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    if n <= k:
        raise ContractViolation(f"need more than k={k} points, got {n}")
    tree = cKDTree(positions)
    m = min(n, k + 2)
    dist, idx = tree.query(positions, k=m)
    out_idx = np.empty((n, k), dtype=np.int64)
    out_dist = np.empty((n, k))
    for i in range(n):
        cand = idx[i][idx[i] != i]
        cd = dist[i][idx[i] != i]
        # Exact ties (duplicates) can make the tree return an arbitrary
        # subset, and a tie group straddling the truncated candidate list
        # may exclude the lowest-index member; fall back to the full scan
        # so the lower-index rule holds.
        if (len(cand) < k or (len(cd) and cd[0] == 0.0)
                or cd[k - 1] == cd[-1]):
            d2 = np.linalg.norm(positions - positions[i], axis=1)
            cand = np.delete(np.arange(n), i)
            cd = np.delete(d2, i)
        order = np.lexsort((cand, cd))[:k]
        out_idx[i] = cand[order]
        out_dist[i] = cd[order]
    return Neighborhood(indices=out_idx, distances=out_dist)


def _qnorm3(terms, cfg: ExpertConfig):
    normed = [quantile_norm(t, cfg.q_lo, cfg.q_hi) for t in terms]
    return np.clip(np.mean(normed, axis=0), 0.0, 1.0)


def geometry_terms(model: GaussianModel, nbrs: Neighborhood):
    """Raw (Iso, RotCons, footprint) before normalization."""
    s = model.scales
    iso = s.min(axis=1) / s.max(axis=1)
    q = model.rotations
    dots = np.abs(np.einsum("nc,nkc->nk", q, q[nbrs.indices]))
    rotcons = dots.mean(axis=1)
    footprint = np.exp(np.log(s).mean(axis=1))
    return iso, rotcons, footprint


def appearance_terms(model: GaussianModel, cfg: ExpertConfig):
    """Raw (rho_hf, opacity gate, DC band-pass, ||h0||)."""
    dc_energy = (model.sh_dc ** 2).sum(axis=1)
    hf_energy = (model.sh_rest ** 2).sum(axis=(1, 2))
    rho_hf = hf_energy / (dc_energy + hf_energy + cfg.eps)
    gate = np.exp(-(model.opacities - cfg.alpha0) ** 2
                  / (2 * cfg.sigma_alpha ** 2))
    dc_norm = np.sqrt(dc_energy)
    m_c = np.median(dc_norm)
    q1, q3 = np.quantile(dc_norm, [0.25, 0.75])
    sigma_c = max((q3 - q1) / 1.349, 1e-6)
    bandpass = np.exp(-(dc_norm - m_c) ** 2 / (2 * sigma_c ** 2))
    return rho_hf, gate, bandpass, dc_norm


def redundancy_terms(model: GaussianModel, nbrs: Neighborhood,
                     footprint: np.ndarray, cfg: ExpertConfig):
    """Overlap weights w_ij, pair similarity r_ij, and the raw z3 score."""
    j = nbrs.indices
    d2 = nbrs.distances ** 2
    sbar2 = footprint ** 2
    overlap = np.exp(-d2 / (cfg.sigma_overlap ** 2
                            * (sbar2[:, None] + sbar2[j])))

    dc = model.sh_dc
    dots = np.einsum("nc,nkc->nk", dc, dc[j])
    norms = np.linalg.norm(dc, axis=1)
    denom = norms[:, None] * norms[j] + cfg.eps
    color_sim = np.clip(dots / denom, 0.0, None)  # opposite colors: 0

    fp_i, fp_j = footprint[:, None], footprint[j]
    shape_sim = (np.minimum(fp_i, fp_j) / np.maximum(fp_i, fp_j)) \
        * np.abs(np.einsum("nc,nkc->nk", model.rotations,
                           model.rotations[j]))
    r = 0.5 * (color_sim + shape_sim)
    raw = (overlap * r).mean(axis=1)
    return overlap, r, raw


def compute_features(model: GaussianModel, nbrs: Neighborhood,
                     cfg: ExpertConfig | None = None) -> FeatureBundle:
    """All three expert feature channels for the whole model."""
    cfg = cfg or ExpertConfig()
    if np.any(model.scales <= 0):
        raise ContractViolation("non-positive scale in model")
    iso, rotcons, footprint = geometry_terms(model, nbrs)
    z1 = _qnorm3([iso, rotcons, 1.0 - footprint], cfg)

    rho_hf, gate, bandpass, dc_norm = appearance_terms(model, cfg)
    z2 = _qnorm3([1.0 - rho_hf, gate, bandpass], cfg)

    overlap, _, raw = redundancy_terms(model, nbrs, footprint, cfg)
    z3 = np.clip(quantile_norm(raw, cfg.q_lo, cfg.q_hi), 0.0, 1.0)

    return FeatureBundle(z=np.stack([z1, z2, z3]), iso=iso, rotcons=rotcons,
                         footprint=footprint, rho_hf=rho_hf, gate=gate,
                         bandpass=bandpass, dc_norm=dc_norm, overlap=overlap,
                         redundancy_raw=raw)


def evidence(features: FeatureBundle, nbrs: Neighborhood,
             cfg: ExpertConfig | None = None) -> EvidencePackage:
    """Per-expert (uncertainty, quality) pair for every Gaussian.

    Uncertainty combines neighborhood dispersion of the expert feature
    with an expert-specific risk penalty; quality is the normalized
    feature itself.
    """
    cfg = cfg or ExpertConfig()
    n = features.z.shape[1]
    idx_with_self = np.concatenate(
        [nbrs.indices, np.arange(n)[:, None]], axis=1)

    penalties = [
        0.5 * (features.iso < cfg.iso_needle_threshold).astype(np.float64),
        0.5 * features.rho_hf,
        0.5 * (1.0 - (features.overlap
                      > cfg.coverage_weight_threshold).mean(axis=1)),
    ]
    U = np.empty((3, n))
    S = np.empty((3, n))
    for k in range(3):
        disp = features.z[k][idx_with_self].std(axis=1)
        U[k] = quantile_norm(disp + penalties[k], cfg.q_lo, cfg.q_hi)
        S[k] = quantile_norm(features.z[k], cfg.q_lo, cfg.q_hi)
    return EvidencePackage(U=np.clip(U, 0, 1), S=np.clip(S, 0, 1))


def export_csv(path, features: FeatureBundle, ev: EvidencePackage) -> None:
    """Audit export: index, features, uncertainty, quality."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "z1", "z2", "z3",
                         "U1", "U2", "U3", "S1", "S2", "S3"])
        for i in range(features.z.shape[1]):
            writer.writerow(
                [i] + [f"{features.z[k, i]:.8f}" for k in range(3)]
                + [f"{ev.U[k, i]:.8f}" for k in range(3)]
                + [f"{ev.S[k, i]:.8f}" for k in range(3)])
