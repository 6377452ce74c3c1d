"""Carrier selection: proxy scores, budget, feasibility, seeds, split."""

import numpy as np
import pytest

from conftest import random_model
from gsmark.config import ConfigurationError, SbagConfig
from gsmark.evalkit import camera_ring, make_synthetic_scene
from gsmark.experts import EvidencePackage
from gsmark.model import ContractViolation, Role
from gsmark.sbag import (CarrierPlan, adaptive_budget, build_carrier_plan,
                         densify_split, feasible_set, prototype_extend,
                         proxy_scores, select_seeds)


def _evidence(rng, n):
    return EvidencePackage(U=rng.random((3, n)), S=rng.random((3, n)))


def test_proxy_scores_invariants(rng):
    ev = _evidence(rng, 50)
    prox = proxy_scores(ev, 0.5)
    assert np.array_equal(prox.R, np.clip(ev.S - 0.5 * ev.U, 0, 1))
    assert np.allclose(prox.u, np.cbrt(prox.R[0] * prox.R[1] * prox.R[2]))
    with pytest.raises(ConfigurationError):
        proxy_scores(ev, -0.1)


def test_adaptive_budget_formula():
    kappa_eff, B = adaptive_budget(32, 2.0, 0.5, 0.8, 1000)
    assert np.isclose(kappa_eff, 0.8)
    assert B == 40
    # Clamped to the model size.
    _, small = adaptive_budget(64, 0.1, 0.5, 0.5, 30)
    assert small == 30
    with pytest.raises(ConfigurationError):
        adaptive_budget(0, 2.0, 0.5, 0.8, 100)
    with pytest.raises(ConfigurationError):
        adaptive_budget(32, 0.0, 0.5, 0.8, 100)


def test_feasible_set_quantile(rng):
    R = rng.random((3, 200))
    v = rng.random(200)
    feas = feasible_set(R, v, 0.3)
    for scores in (R[0], R[1], R[2], v):
        assert np.all(scores[feas] >= np.quantile(scores, 0.3))
    assert np.array_equal(feasible_set(R, v, 0.0), np.arange(200))
    with pytest.raises(ConfigurationError):
        feasible_set(R, v, 1.0)


def test_select_seeds_tiebreak():
    u = np.array([0.5, 0.9, 0.9, 0.1, 0.9])
    picked = select_seeds(np.arange(5), u, 2)
    assert np.array_equal(picked, [1, 2])   # ties go to the lower index
    assert np.array_equal(select_seeds(np.array([4, 2, 1]), u, 2), [1, 2])


def test_prototype_extend(rng):
    e = rng.random((40, 6))
    seeds = np.array([0, 1, 2])
    prox, mu = prototype_extend(seeds, e, 0.9, 5)
    assert np.array_equal(mu, e[seeds].mean(axis=0))
    assert len(prox) <= 5
    assert not np.intersect1d(prox, seeds).size
    mu_n = mu / np.linalg.norm(mu)
    for i in prox:
        sim = e[i] @ mu_n / np.linalg.norm(e[i])
        assert sim >= 0.9 - 1e-12
    with pytest.raises(ContractViolation):
        prototype_extend(np.zeros(0, dtype=np.int64), e, 0.9, 5)
    with pytest.warns(UserWarning):
        empty, _ = prototype_extend(seeds, np.zeros((40, 6)), 0.9, 5)
    assert empty.size == 0


def test_densify_split_structure(rng):
    model = random_model(rng, 12)
    parents = np.array([2, 5, 9])
    new, wm, vis = densify_split(model, parents, 2)
    assert len(new) == 12 + 3
    assert len(wm) == 3 and len(vis) == 3
    assert not np.intersect1d(wm, vis).size
    assert np.all(new.roles[wm] == Role.WM)
    assert np.all(new.roles[vis] == Role.VIS)
    # Concentrate mode: WM child inherits the parent verbatim, the
    # compensator child starts nearly transparent.
    assert np.allclose(new.opacities[wm],
                       model.opacities[parents], atol=1e-12)
    assert np.all(new.opacities[vis] == SbagConfig().compensator_opacity)
    assert np.allclose(new.positions[wm], model.positions[parents])
    with pytest.raises(ContractViolation):
        densify_split(model, parents, 1)


def test_densify_split_equal_mode(rng):
    model = random_model(rng, 10)
    cfg = SbagConfig(split_opacity_mode="equal", split_scale_mode="area")
    parents = np.array([0, 4])
    new, wm, vis = densify_split(model, parents, 2, cfg)
    want = 1.0 - np.sqrt(1.0 - model.opacities[parents])
    assert np.allclose(new.opacities[wm], want, atol=1e-12)
    assert np.allclose(new.scales[wm],
                       model.scales[parents] / np.sqrt(2), atol=1e-12)
    bad = SbagConfig(split_opacity_mode="nope")
    with pytest.raises(ConfigurationError):
        densify_split(model, parents, 2, bad)


def test_densify_split_noncarrier_role(rng):
    model = random_model(rng, 8)
    cfg = SbagConfig(noncarrier_role="neutral")
    new, wm, vis = densify_split(model, np.array([1]), 2, cfg)
    others = np.setdiff1d(np.arange(len(new)), np.union1d(wm, vis))
    assert np.all(new.roles[others] == Role.NEUTRAL)
    allvis, wm2, vis2 = densify_split(model, np.array([1]), 2, SbagConfig())
    others2 = np.setdiff1d(np.arange(len(allvis)), wm2)
    assert np.all(allvis.roles[others2] == Role.VIS)


def test_carrier_plan_roundtrip_and_digest(tmp_path, rng):
    plan = CarrierPlan(
        budget_B=5, seeds=np.array([1, 2]), prox=np.array([7]),
        parents=np.array([1, 2, 7]), wm_children=np.array([1, 2, 8]),
        vis_children=np.array([3, 4, 9]),
        prototype=rng.random(6), eta=0.7, v_bar=0.4, kappa_eff=0.56)
    path = tmp_path / "plan.txt"
    plan.save(path)
    back = CarrierPlan.load(path)
    assert back.digest() == plan.digest()
    assert np.array_equal(back.seeds, plan.seeds)
    assert np.array_equal(back.prototype, plan.prototype)
    assert back.eta == plan.eta


def test_build_carrier_plan_invariants():
    model, cameras = make_synthetic_scene(80, 4, 32, seed=4, rig="arc")
    new, plan = build_carrier_plan(model, cameras[:3], 32)
    assert np.all(np.isin(plan.seeds, plan.parents))
    assert len(plan.seeds) <= plan.budget_B
    assert len(plan.wm_children) == len(plan.parents)
    assert not np.intersect1d(plan.wm_children, plan.vis_children).size
    assert np.array_equal(new.wm_indices, plan.wm_children)
    assert len(new) == len(model) + len(plan.parents)
    new.validate()


def test_build_carrier_plan_determinism():
    model, cameras = make_synthetic_scene(80, 4, 32, seed=4, rig="arc")
    _, p1 = build_carrier_plan(model, cameras[:3], 32)
    _, p2 = build_carrier_plan(model, cameras[:3], 32)
    assert p1.digest() == p2.digest()


def test_build_carrier_plan_fixed_fraction():
    model, cameras = make_synthetic_scene(80, 4, 32, seed=4, rig="arc")
    cfg = SbagConfig(budget_mode="fixed-fraction", budget_fraction=0.1)
    _, plan = build_carrier_plan(model, cameras[:3], 32, cfg)
    assert plan.budget_B == 8
    cfg = SbagConfig(budget_mode="nope")
    with pytest.raises(ConfigurationError):
        build_carrier_plan(model, cameras[:3], 32, cfg)
