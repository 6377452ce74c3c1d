"""Safety-and-Budget-Aware Gate: proxy scoring, adaptive budget, feasible
filtering, water-level seed selection, prototype extension, and the
densify-split that yields watermark carriers and visual compensators.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gsmark.config import ConfigurationError, ExpertConfig, SbagConfig
from gsmark.experts import (EvidencePackage, FeatureBundle, compute_features,
                            evidence, knn, quantile_norm)
from gsmark.model import ContractViolation, GaussianModel, Role
from gsmark.render import visibility_stats


@dataclass
class ProxyScores:
    R: np.ndarray  # (3, N) in [0, 1]
    u: np.ndarray  # (N,) symmetric utility (geometric mean)


@dataclass
class CarrierPlan:
    """Full record of one selection run (the attribution artifact)."""

    budget_B: int
    seeds: np.ndarray         # original-model indices
    prox: np.ndarray
    parents: np.ndarray
    wm_children: np.ndarray   # densified-model indices
    vis_children: np.ndarray
    prototype: np.ndarray     # (6,) evidence-space mean over seeds
    eta: float
    v_bar: float
    kappa_eff: float
    n_split: int = 2

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.seeds, self.prox, self.parents,
                    self.wm_children, self.vis_children):
            h.update(np.asarray(arr, dtype=np.int64).tobytes())
        h.update(np.asarray([self.budget_B, self.n_split],
                            dtype=np.int64).tobytes())
        h.update(np.asarray([self.eta, self.v_bar, self.kappa_eff],
                            dtype=np.float64).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        lines = [
            f"budget_B {self.budget_B}",
            f"n_split {self.n_split}",
            f"eta {float(self.eta)!r}",
            f"v_bar {float(self.v_bar)!r}",
            f"kappa_eff {float(self.kappa_eff)!r}",
            "prototype " + " ".join(repr(float(x))
                                    for x in self.prototype),
        ]
        for name in ("seeds", "prox", "parents", "wm_children",
                     "vis_children"):
            vals = " ".join(str(int(i)) for i in getattr(self, name))
            lines.append(f"{name} {vals}".rstrip())
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CarrierPlan":
        data = {}
        for line in Path(path).read_text().splitlines():
            key, _, rest = line.partition(" ")
            data[key] = rest.split()
        return cls(
            budget_B=int(data["budget_B"][0]),
            n_split=int(data["n_split"][0]),
            eta=float(data["eta"][0]),
            v_bar=float(data["v_bar"][0]),
            kappa_eff=float(data["kappa_eff"][0]),
            prototype=np.array([float(x) for x in data["prototype"]]),
            seeds=np.array([int(x) for x in data.get("seeds", [])],
                           dtype=np.int64),
            prox=np.array([int(x) for x in data.get("prox", [])],
                          dtype=np.int64),
            parents=np.array([int(x) for x in data.get("parents", [])],
                             dtype=np.int64),
            wm_children=np.array(
                [int(x) for x in data.get("wm_children", [])],
                dtype=np.int64),
            vis_children=np.array(
                [int(x) for x in data.get("vis_children", [])],
                dtype=np.int64))


def proxy_scores(ev: EvidencePackage, beta: float) -> ProxyScores:
    """Confidence-discounted quality per expert and the symmetric utility."""
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    R = np.clip(ev.S - beta * ev.U, 0.0, 1.0)
    u = np.cbrt(R[0] * R[1] * R[2])
    return ProxyScores(R=R, u=u)


def adaptive_budget(message_bits: int, kappa0: float, v_bar: float,
                    eta: float, n_gaussians: int):
    """Scene-adaptive carrier budget: kappa_eff = kappa0 * v_bar * eta,
    B = ceil(M / kappa_eff), clamped to [1, N]."""
    if message_bits < 1:
        raise ConfigurationError("message length must be >= 1")
    kappa_eff = kappa0 * v_bar * eta
    if kappa_eff <= 0:
        raise ConfigurationError("kappa_eff is zero; cannot budget carriers")
    B = int(np.ceil(message_bits / kappa_eff))
    return kappa_eff, int(np.clip(B, 1, max(n_gaussians, 1)))


def feasible_set(R: np.ndarray, v: np.ndarray, q: float) -> np.ndarray:
    """Indices passing all four lower-quantile constraints."""
    if not 0 <= q < 1:
        raise ConfigurationError("quantile must be in [0, 1)")
    keep = np.ones(len(v), dtype=bool)
    for scores in (R[0], R[1], R[2], v):
        keep &= scores >= np.quantile(scores, q)
    return np.flatnonzero(keep)


def select_seeds(feasible: np.ndarray, u: np.ndarray,
                 budget: int) -> np.ndarray:
    """Deterministic water-level pick: top-B utility inside the feasible
    set, ties to the lower index; result sorted by index."""
    feasible = np.asarray(feasible, dtype=np.int64)
    order = np.lexsort((feasible, -u[feasible]))
    return np.sort(feasible[order[:budget]])


def prototype_extend(seeds: np.ndarray, e: np.ndarray, sim_threshold: float,
                     max_extra: int):
    """Recruit non-seeds whose evidence vector is cosine-close to the seed
    prototype; returns (prox indices, prototype)."""
    seeds = np.asarray(seeds, dtype=np.int64)
    if seeds.size == 0:
        raise ContractViolation("prototype extension needs nonempty seeds")
    mu = e[seeds].mean(axis=0)
    mu_norm = np.linalg.norm(mu)
    if mu_norm < 1e-12:
        warnings.warn("zero prototype vector; skipping extension")
        return np.zeros(0, dtype=np.int64), mu
    mask = np.ones(len(e), dtype=bool)
    mask[seeds] = False
    cand = np.flatnonzero(mask)
    norms = np.linalg.norm(e[cand], axis=1)
    sims = (e[cand] @ mu) / (np.maximum(norms, 1e-12) * mu_norm)
    ok = sims >= sim_threshold
    cand, sims = cand[ok], sims[ok]
    order = np.lexsort((cand, -sims))[:max_extra]
    return np.sort(cand[order]), mu


def evidence_vector(proxy: ProxyScores, v: np.ndarray,
                    features: FeatureBundle,
                    cfg: ExpertConfig | None = None) -> np.ndarray:
    """Compact per-Gaussian evidence (R1, R2, R3, v, rho_hf, ||h0||),
    column-wise quantile-normalized."""
    cfg = cfg or ExpertConfig()
    cols = [proxy.R[0], proxy.R[1], proxy.R[2], v, features.rho_hf,
            features.dc_norm]
    return np.stack([quantile_norm(c, cfg.q_lo, cfg.q_hi) for c in cols],
                    axis=1)


def _split_scale_factor(mode: str, n_split: int) -> float:
    if mode == "none":
        return 1.0
    if mode == "area":
        return n_split ** -0.5
    if mode == "volume":
        return n_split ** (-1.0 / 3.0)
    raise ConfigurationError(f"unknown split_scale_mode {mode!r}")


def densify_split(model: GaussianModel, parents: np.ndarray, n_split: int,
                  cfg: SbagConfig | None = None):
    """Replace each parent with ``n_split`` coincident children; the first
    child becomes the watermark carrier, the rest visual compensators.

    Returns (new model, wm child indices, vis child indices) with indices
    into the new model; survivor order is preserved.
    """
    cfg = cfg or SbagConfig()
    if n_split < 2:
        raise ContractViolation("n_split must be >= 2")
    n = len(model)
    parents = np.asarray(parents, dtype=np.int64)
    is_parent = np.zeros(n, dtype=bool)
    is_parent[parents] = True

    counts = np.where(is_parent, n_split, 1)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    rep = np.repeat(np.arange(n), counts)
    rank = np.arange(total) - start[rep]
    child = is_parent[rep]

    new = GaussianModel(
        positions=model.positions[rep].copy(),
        scales=model.scales[rep].copy(),
        rotations=model.rotations[rep].copy(),
        opacities=model.opacities[rep].copy(),
        sh_dc=model.sh_dc[rep].copy(),
        sh_rest=model.sh_rest[rep].copy(),
        roles=model.roles[rep].copy(),
        sh_degree=model.sh_degree)

    factor = _split_scale_factor(cfg.split_scale_mode, n_split)
    new.scales[child] *= factor
    if cfg.split_opacity_mode == "equal":
        parent_alpha = model.opacities[rep][child]
        new.opacities[child] = 1.0 - (1.0 - parent_alpha) ** (1.0 / n_split)
    elif cfg.split_opacity_mode == "concentrate":
        new.opacities[child & (rank > 0)] = cfg.compensator_opacity
    else:
        raise ConfigurationError(
            f"unknown split_opacity_mode {cfg.split_opacity_mode!r}")

    wm_children = start[parents]
    vis_children = np.flatnonzero(child & (rank > 0))
    new.roles[:] = Role.NEUTRAL
    if cfg.noncarrier_role == "all-vis":
        new.roles[:] = Role.VIS
    elif cfg.noncarrier_role != "neutral":
        raise ConfigurationError(
            f"unknown noncarrier_role {cfg.noncarrier_role!r}")
    new.roles[vis_children] = Role.VIS
    new.roles[np.sort(wm_children)] = Role.WM
    return new, np.sort(wm_children), np.sort(vis_children)


def build_carrier_plan(model: GaussianModel, cameras, message_bits: int,
                       sbag_cfg: SbagConfig | None = None,
                       expert_cfg: ExpertConfig | None = None):
    """One-shot selection pipeline: evidence -> budget -> feasible set ->
    seeds -> prototype extension -> densify-split.

    Returns (densified model, CarrierPlan).
    """
    sbag_cfg = sbag_cfg or SbagConfig()
    expert_cfg = expert_cfg or ExpertConfig()
    n = len(model)

    nbrs = knn(model.positions, min(expert_cfg.k_neighbors, n - 1))
    features = compute_features(model, nbrs, expert_cfg)
    ev = evidence(features, nbrs, expert_cfg)
    proxy = proxy_scores(ev, sbag_cfg.beta)

    v, eta, v_bar = visibility_stats(model, cameras)

    if sbag_cfg.budget_mode == "adaptive":
        kappa_eff, budget = adaptive_budget(message_bits, sbag_cfg.kappa0,
                                            max(v_bar, 1e-12), eta, n)
    elif sbag_cfg.budget_mode == "fixed-fraction":
        budget = int(np.clip(np.ceil(sbag_cfg.budget_fraction * n), 1, n))
        kappa_eff = message_bits / budget
    else:
        raise ConfigurationError(
            f"unknown budget_mode {sbag_cfg.budget_mode!r}")

    q = sbag_cfg.quantile
    feas = feasible_set(proxy.R, v, q)
    while len(feas) < budget and q >= 0.01:
        q = q / 2.0
        feas = feasible_set(proxy.R, v, q)
    if len(feas) == 0:
        warnings.warn("feasible set empty after relaxation; "
                      "falling back to global top-B by utility")
        feas = np.arange(n)

    seeds = select_seeds(feas, proxy.u, budget)
    e = evidence_vector(proxy, v, features, expert_cfg)
    max_extra = int(np.ceil(sbag_cfg.max_extra_fraction * budget))
    prox, mu = prototype_extend(seeds, e, sbag_cfg.sim_threshold, max_extra)
    parents = np.union1d(seeds, prox)

    new_model, wm_children, vis_children = densify_split(
        model, parents, sbag_cfg.n_split, sbag_cfg)
    plan = CarrierPlan(budget_B=budget, seeds=seeds, prox=prox,
                       parents=parents, wm_children=wm_children,
                       vis_children=vis_children, prototype=mu,
                       eta=eta, v_bar=v_bar, kappa_eff=kappa_eff,
                       n_split=sbag_cfg.n_split)
    return new_model, plan
