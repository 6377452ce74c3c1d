"""Closed-form carrier alignment: drive every view-averaged decoder
logit past a sign margin with the least-energy image perturbation.

The rendered image is linear in per-Gaussian colors, so for each view we
can assemble the exact Jacobian from decoder logits to carrier colors
via the per-carrier compositing weight maps.  A small active-set QP then
finds per-view carrier color offsets minimizing the image-space energy
subject to t_m * z_m >= margin, and the offsets are folded back into the
carriers' spherical-harmonic coefficients by interpolation over the
training view directions.  Because rendering is only piecewise linear
(color clipping, occlusion does not move but saturation can), the solve
is repeated for a few rounds until no margin is violated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gsmark import codec
from gsmark.codec import Decoder, Message
from gsmark.config import AlignConfig
from gsmark.model import ContractViolation, GaussianModel
from gsmark.render import (_C0, compute_colors, contribution_maps, render,
                           sh_basis)


@dataclass
class AlignReport:
    """Diagnostics from one alignment run."""

    rounds: int = 0
    active_per_round: list = field(default_factory=list)
    logits_before: np.ndarray | None = None
    logits_after: np.ndarray | None = None
    max_color_shift: float = 0.0

    @property
    def worst_margin_before(self) -> float:
        return float("nan") if self.logits_before is None else \
            float(np.min(np.abs(self.logits_before)))


def _margin_qp(zbar: np.ndarray, gram: np.ndarray, targets: np.ndarray,
               margin: float, max_iters: int = 60):
    """Active-set solve of min-energy corrections subject to
    targets * (zbar + gram @ lam) >= margin on the active rows."""
    n = len(zbar)
    active = np.zeros(n, dtype=bool)
    lam = np.zeros(0)
    for _ in range(max_iters):
        if active.any():
            sub = gram[np.ix_(active, active)]
            rhs = targets[active] * margin - zbar[active]
            lam = np.linalg.solve(sub + 1e-12 * np.eye(active.sum()), rhs)
            z_new = zbar + gram[:, active] @ lam
        else:
            lam = np.zeros(0)
            z_new = zbar.copy()
        violated = targets * z_new < margin - 1e-9
        drop = np.zeros(n, dtype=bool)
        if active.any():
            drop[np.flatnonzero(active)[targets[active] * lam < 0]] = True
        proposal = (active | violated) & ~drop
        if (proposal == active).all():
            break
        active = proposal
    return active, lam


def _view_system(model: GaussianModel, camera, decoder: Decoder,
                 carriers: np.ndarray, cfg: AlignConfig):
    """Per-view logits, color-to-logit Jacobian, and the inverse energy
    metric (footprint Gram with overlap/visibility ridges) applied to it."""
    n_car = len(carriers)
    n_bits = decoder.n_bits
    img = render(model, camera).image
    z, vjp = codec.decode_with_vjp(decoder, img)
    maps = contribution_maps(model, camera, carriers)
    flat = maps.reshape(n_car, -1)
    gram = flat @ flat.T
    # dz_m/dc_{i,ch}: decoder is linear, so pull each logit's image
    # pattern back and weight it by the carrier footprints.
    patterns = np.stack([vjp(np.eye(n_bits)[m]) for m in range(n_bits)])
    jac = np.einsum("nhw,mhwc->mnc", maps, patterns).reshape(n_bits, -1)
    diag = np.diag(gram)
    visible = diag[diag > 1e-8]
    scale = np.median(visible) if visible.size else 1.0
    metric = (np.kron(gram, np.eye(3))
              + cfg.overlap_ridge * np.diag(np.repeat(diag, 3))
              + (cfg.footprint_ridge * scale + 1e-6) * np.eye(3 * n_car))
    return z, jac, np.linalg.solve(metric, jac.T)


def _clamp_offsets(model: GaussianModel, cameras, carriers: np.ndarray,
                   colors: np.ndarray, pad: float = 0.005) -> np.ndarray:
    """Shrink per-view offsets so the applied colors stay renderable.

    Rendering clips colors to [0, 1]; any offset past the clip point is
    invisible on screen but still costs later rounds accuracy, so cap
    each target color just inside the valid range instead.
    """
    out = np.empty_like(colors)
    for v, cam in enumerate(cameras):
        raw, _, _ = compute_colors(model, cam)
        raw = raw[carriers]
        out[v] = np.clip(raw + colors[v], pad, 1.0 - pad) - raw
    return out


def _apply_view_colors(model: GaussianModel, cameras, carriers: np.ndarray,
                       colors: np.ndarray, sh_ridge: float) -> float:
    """Fold per-view color offsets (V, n_car, 3) into each carrier's SH
    coefficients by least-norm interpolation over the view directions."""
    n_views = len(cameras)
    n_basis = (model.sh_degree + 1) ** 2
    shift = 0.0
    for k, i in enumerate(carriers):
        phi = np.zeros((n_views, n_basis))
        for v, cam in enumerate(cameras):
            d = model.positions[i] - cam.center
            d = d / np.linalg.norm(d)
            basis = sh_basis(d[None], model.sh_degree)[0]
            phi[v, 0] = _C0
            phi[v, 1:] = basis[1:]
        gram = phi @ phi.T + sh_ridge * np.eye(n_views)
        theta = phi.T @ np.linalg.solve(gram, colors[:, k, :])
        model.sh_dc[i] += theta[0]
        model.sh_rest[i] += theta[1:]
        shift = max(shift, float(np.abs(colors[:, k, :]).max()))
    return shift


def align_carriers(model: GaussianModel, cameras, decoder: Decoder,
                   message: Message, cfg: AlignConfig | None = None
                   ) -> AlignReport:
    """Embed ``message`` by adjusting carrier colors in place.

    Requires assigned carrier roles and at least one camera.  Returns a
    report with logits before/after and per-round active-constraint
    counts; the model's positions, shapes, and opacities are untouched.
    """
    cfg = cfg or AlignConfig()
    carriers = model.wm_indices
    if not len(carriers):
        raise ContractViolation("alignment needs carrier Gaussians")
    if not len(cameras):
        raise ContractViolation("alignment needs at least one camera")
    n_views = len(cameras)
    targets = 2 * message.bits - 1
    report = AlignReport()

    for round_idx in range(cfg.rounds):
        logits, jacs, solved = [], [], []
        gram_total = np.zeros((decoder.n_bits, decoder.n_bits))
        for cam in cameras:
            z, jac, solved_jt = _view_system(model, cam, decoder,
                                             carriers, cfg)
            logits.append(z)
            jacs.append(jac)
            solved.append(solved_jt)
            gram_total += jac @ solved_jt
        zbar = np.mean(logits, axis=0)
        if report.logits_before is None:
            report.logits_before = zbar.copy()
        gram_total /= n_views * n_views

        active, lam = _margin_qp(zbar, gram_total, targets, cfg.margin)
        report.rounds = round_idx + 1
        report.active_per_round.append(int(active.sum()))
        if not active.any():
            break
        colors = np.zeros((n_views, len(carriers), 3))
        for v in range(n_views):
            colors[v] = (solved[v][:, active] @ lam / n_views) \
                .reshape(len(carriers), 3)
        colors = _clamp_offsets(model, cameras, carriers, colors)
        shift = _apply_view_colors(model, cameras, carriers, colors,
                                   cfg.sh_ridge)
        report.max_color_shift = max(report.max_color_shift, shift)

    final = [codec.decode(decoder, render(model, cam).image)
             for cam in cameras]
    report.logits_after = codec.aggregate_logits(final)
    return report
