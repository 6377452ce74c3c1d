"""Per-Gaussian expert features, kNN, and evidence packaging."""

import csv

import numpy as np
import pytest

from conftest import random_model
from gsmark.config import ExpertConfig
from gsmark.experts import (FeatureBundle, compute_features, evidence,
                            export_csv, knn, quantile_norm)
from gsmark.model import ContractViolation


def _brute_knn(positions, k):
    n = len(positions)
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        d = np.linalg.norm(positions - positions[i], axis=1)
        cand = np.delete(np.arange(n), i)
        cd = np.delete(d, i)
        order = np.lexsort((cand, cd))[:k]
        idx[i] = cand[order]
        dist[i] = cd[order]
    return idx, dist


def test_knn_matches_bruteforce(rng):
    pts = rng.standard_normal((60, 3))
    nbrs = knn(pts, 5)
    idx, dist = _brute_knn(pts, 5)
    assert np.array_equal(nbrs.indices, idx)
    assert np.allclose(nbrs.distances, dist, atol=1e-12)


def test_knn_duplicate_points_tiebreak(rng):
    pts = rng.standard_normal((20, 3))
    pts[7] = pts[3]          # exact duplicate: ties break to lower index
    pts[12] = pts[3]
    nbrs = knn(pts, 4)
    idx, _ = _brute_knn(pts, 4)
    assert np.array_equal(nbrs.indices, idx)


def test_knn_too_few_points(rng):
    with pytest.raises(ContractViolation):
        knn(rng.standard_normal((4, 3)), 4)


def test_quantile_norm(rng):
    x = rng.standard_normal(500)
    z = quantile_norm(x)
    assert z.min() >= 0.0 and z.max() <= 1.0
    # Monotone on the interior (clipped tails may tie).
    inner = (z > 0) & (z < 1)
    order = np.argsort(x[inner])
    assert np.all(np.diff(z[inner][order]) >= 0)
    assert np.all(quantile_norm(np.full(10, 3.0)) == 0.5)


def test_compute_features_ranges(rng):
    model = random_model(rng, 80)
    nbrs = knn(model.positions, 8)
    feats = compute_features(model, nbrs)
    assert feats.z.shape == (3, 80)
    assert feats.z.min() >= 0.0 and feats.z.max() <= 1.0
    assert np.all(feats.iso > 0) and np.all(feats.iso <= 1.0)
    assert np.all(feats.rho_hf >= 0) and np.all(feats.rho_hf <= 1.0)
    assert np.all(feats.gate > 0) and np.all(feats.gate <= 1.0)
    assert feats.overlap.shape == (80, 8)
    assert np.all(feats.overlap > 0) and np.all(feats.overlap <= 1.0)


def test_compute_features_rejects_bad_scales(rng):
    model = random_model(rng, 20)
    model.scales[0, 0] = -1.0
    nbrs = knn(model.positions, 4)
    with pytest.raises(ContractViolation):
        compute_features(model, nbrs)


def test_opacity_gate_peaks_at_center(rng):
    cfg = ExpertConfig()
    model = random_model(rng, 30, opacity_range=(0.05, 0.95))
    model.opacities[0] = cfg.alpha0
    nbrs = knn(model.positions, 5)
    feats = compute_features(model, nbrs, cfg)
    assert np.isclose(feats.gate[0], 1.0, atol=1e-12)
    assert np.all(feats.gate <= feats.gate[0] + 1e-12)


def test_evidence_ranges_and_determinism(rng):
    model = random_model(rng, 60)
    nbrs = knn(model.positions, 6)
    feats = compute_features(model, nbrs)
    ev1 = evidence(feats, nbrs)
    ev2 = evidence(feats, nbrs)
    assert np.array_equal(ev1.U, ev2.U)
    assert np.array_equal(ev1.S, ev2.S)
    assert ev1.U.min() >= 0.0 and ev1.U.max() <= 1.0
    assert ev1.S.min() >= 0.0 and ev1.S.max() <= 1.0
    # S is a monotone transform of z: identical argsort on the interior.
    for k in range(3):
        inner = (ev1.S[k] > 0) & (ev1.S[k] < 1)
        order = np.argsort(feats.z[k][inner])
        assert np.all(np.diff(ev1.S[k][inner][order]) >= 0)


def test_evidence_constant_feature(rng):
    # Constant z and equal penalties leave U at the degenerate 0.5 level.
    n = 20
    feats = FeatureBundle(
        z=np.full((3, n), 0.5), iso=np.full(n, 0.8),
        rotcons=np.full(n, 0.9), footprint=np.full(n, 0.1),
        rho_hf=np.full(n, 0.2), gate=np.full(n, 0.7),
        bandpass=np.full(n, 0.6), dc_norm=np.full(n, 0.3),
        overlap=np.full((n, 4), 0.5), redundancy_raw=np.full(n, 0.4))
    pts = np.random.default_rng(3).standard_normal((n, 3))
    nbrs = knn(pts, 4)
    ev = evidence(feats, nbrs)
    assert np.all(ev.U == 0.5)
    assert np.all(ev.S == 0.5)


def test_export_csv(tmp_path, rng):
    model = random_model(rng, 15)
    nbrs = knn(model.positions, 4)
    feats = compute_features(model, nbrs)
    ev = evidence(feats, nbrs)
    path = tmp_path / "features.csv"
    export_csv(path, feats, ev)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "z1", "z2", "z3",
                       "U1", "U2", "U3", "S1", "S2", "S3"]
    assert len(rows) == 16
    assert float(rows[1][1]) == pytest.approx(feats.z[0, 0], abs=1e-7)
