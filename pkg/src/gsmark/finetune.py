"""Decoupled watermark finetuning.

Each step renders one view and runs two independent backward passes: a
visual-fidelity loss whose gradients touch only compensator Gaussians,
and a watermark loss (clean + expectation over distortions + low-band
anchor) whose gradients touch only carrier Gaussians.  The two gradient
sets are merged under the channel-group mask and applied by Adam in
pre-activation space (logit opacity, log scale); positions stay frozen.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from gsmark import codec, metrics, wavelet
from gsmark.codec import Decoder, DistortionSpec, Message
from gsmark.config import Config
from gsmark.groupmask import GroupMask, route_gradients
from gsmark.model import GaussianModel, Role, logit, sigmoid
from gsmark.render import CHANNEL_GROUPS, GradientSet, render, render_backward


class TrainingError(RuntimeError):
    """Raised when optimization produces non-finite or diverging values."""


@dataclass
class AdamState:
    m: GradientSet
    v: GradientSet
    t: int = 0

    @classmethod
    def for_model(cls, model: GaussianModel) -> "AdamState":
        return cls(m=GradientSet.zeros(model), v=GradientSet.zeros(model))


@dataclass
class RunManifest:
    """Reproducibility record for one finetuning run."""

    config: dict
    plan_digest: str
    decoder_hash: str
    message_hex: str
    mask_wm: list
    mask_vis: list
    n_gaussians: int
    n_carriers: int
    n_views: int
    steps: int = 0
    wall_seconds: float = 0.0
    log: list = field(default_factory=list)  # dicts per logged step
    aborted: str = ""

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.__dict__, fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**yaml.safe_load(fh))


def vis_loss_grad(img: np.ndarray, ref: np.ndarray, cfg,
                  wavelet_levels: int):
    """Visual fidelity loss and dL/dimage: reconstruction L1, perceptual
    (1 - multiscale SSIM), and high-band wavelet anchor."""
    diff = img - ref
    l1 = float(np.abs(diff).mean())
    g = cfg.lambda_rec * np.sign(diff) / diff.size

    msv, msg = metrics.ms_ssim_grad(img, ref)
    g -= cfg.lambda_perceptual * msg

    hfv, hfg = wavelet.highfreq_loss_grad(img, ref, wavelet_levels)
    g += cfg.lambda_wav_high * hfg

    value = (cfg.lambda_rec * l1 + cfg.lambda_perceptual * (1.0 - msv)
             + cfg.lambda_wav_high * hfv)
    return value, g, {"l1": l1, "ms_ssim": msv, "wav_high": hfv}


def wm_loss_grad(img: np.ndarray, ref: np.ndarray, decoder: Decoder,
                 message: Message, cfg, codec_cfg, wavelet_levels: int,
                 rng, eot: bool = True):
    """Watermark loss and dL/dimage for one view.

    Clean logits come straight from the decoder; the distortion term
    averages decoder BCE over sampled train-surrogate distortions and
    pulls gradients back through each distortion's adjoint.
    """
    bits = message.bits
    z, vjp = codec.decode_with_vjp(decoder, img)
    l_clean = codec.bce_from_logits(z, bits)
    g = cfg.lambda_clean * vjp(codec.bce_grad_logits(z, bits))

    l_eot = 0.0
    if eot and codec_cfg.eot_samples > 0:
        kinds = rng.choice(len(codec_cfg.eot_kinds),
                           size=codec_cfg.eot_samples)
        g_eot = np.zeros_like(img)
        for kind_idx in kinds:
            spec = DistortionSpec.default_for(
                codec_cfg.eot_kinds[int(kind_idx)],
                mode="train-surrogate", cfg=codec_cfg)
            dimg, dvjp = codec.distort_with_vjp(img, spec, rng)
            zd, dec_vjp = codec.decode_with_vjp(decoder, dimg)
            l_eot += codec.bce_from_logits(zd, bits)
            g_eot += dvjp(dec_vjp(codec.bce_grad_logits(zd, bits)))
        l_eot /= codec_cfg.eot_samples
        g += cfg.lambda_eot * g_eot / codec_cfg.eot_samples

    lfv, lfg = wavelet.lowfreq_loss_grad(img, ref, wavelet_levels)
    g += cfg.lambda_low * lfg

    value = (cfg.lambda_clean * l_clean + cfg.lambda_eot * l_eot
             + cfg.lambda_low * lfv)
    stats = {"bce_clean": l_clean, "bce_eot": l_eot, "wav_low": lfv,
             "bit_acc": codec.bit_accuracy(z, message)}
    return value, g, stats


_GROUP_LR_FIELD = {"dc": "lr_dc", "rest": "lr_rest", "opa": "lr_opa",
                   "rot": "lr_rot", "sca": "lr_sca"}


def _to_preactivation(grads: GradientSet,
                      model: GaussianModel) -> GradientSet:
    """Reparametrize activated-space gradients: opacity to logit space,
    scale to log space.  Color and rotation are already native."""
    alpha = model.opacities
    return GradientSet(
        sh_dc=grads.sh_dc,
        sh_rest=grads.sh_rest,
        opacity=grads.opacity * alpha * (1.0 - alpha),
        rotation=grads.rotation,
        scale=grads.scale * model.scales)


def _clip_global(grads: GradientSet, max_norm: float) -> float:
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in CHANNEL_GROUPS:
            grads.group(name)[...] *= factor
    return norm


def adam_step(model: GaussianModel, grads: GradientSet, state: AdamState,
              cfg) -> None:
    """One Adam update in pre-activation space, written back through the
    activations.  Rows with zero gradient still decay bias correction but
    receive a zero step, so untouched Gaussians stay bitwise identical."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t

    theta = {
        "dc": model.sh_dc,
        "rest": model.sh_rest,
        "opa": logit(np.clip(model.opacities, 1e-6, 1.0 - 1e-6)),
        "rot": model.rotations.copy(),
        "sca": np.log(model.scales),
    }
    touched = {}
    for name in CHANNEL_GROUPS:
        g = grads.group(name)
        m = state.m.group(name)
        v = state.v.group(name)
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        step = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        rows = np.any(g != 0, axis=tuple(range(1, g.ndim))) \
            if g.ndim > 1 else (g != 0)
        touched[name] = rows
        lr = getattr(cfg, _GROUP_LR_FIELD[name])
        upd = lr * step
        upd[~rows] = 0.0
        theta[name] = theta[name] - upd

    model.sh_dc = theta["dc"]
    model.sh_rest = theta["rest"]
    # Restore untouched rows through the activations so they stay bitwise
    # identical (sigmoid/logit and quaternion renormalization are not
    # exact round trips).
    opa = sigmoid(theta["opa"])
    opa[~touched["opa"]] = model.opacities[~touched["opa"]]
    model.opacities = opa
    q = theta["rot"] / np.linalg.norm(theta["rot"], axis=1, keepdims=True)
    q[~touched["rot"]] = model.rotations[~touched["rot"]]
    model.rotations = q
    sca = np.exp(theta["sca"])
    sca[~touched["sca"]] = model.scales[~touched["sca"]]
    model.scales = sca


def train_step(model: GaussianModel, camera, ref_img: np.ndarray,
               decoder: Decoder, message: Message, mask: GroupMask,
               cfg: Config, state: AdamState, rng,
               threads: int = 1) -> dict:
    """One decoupled update on a single view.  Returns step statistics."""
    tcfg = cfg.train
    img = render(model, camera, threads=threads).image

    v_vis, g_vis_img, vis_stats = vis_loss_grad(
        img, ref_img, tcfg, cfg.wavelet.levels)
    v_wm, g_wm_img, wm_stats = wm_loss_grad(
        img, ref_img, decoder, message, tcfg, cfg.codec,
        cfg.wavelet.levels, rng, eot=tcfg.eot_enabled)

    grads_vis = render_backward(model, camera, g_vis_img,
                                role_filter=(Role.VIS,))
    grads_wm = render_backward(model, camera, g_wm_img,
                               role_filter=(Role.WM,))
    merged = route_gradients(grads_wm, grads_vis, model.roles, mask)
    merged = _to_preactivation(merged, model)

    raw_norm = _clip_global(merged, tcfg.grad_clip_norm)
    if not np.isfinite(raw_norm):
        raise TrainingError("non-finite gradient norm; aborting")
    total = v_vis + v_wm
    if not np.isfinite(total) or total > tcfg.divergence_limit:
        raise TrainingError(f"loss diverged to {total!r}; aborting")

    adam_step(model, merged, state, tcfg)
    return {"loss_vis": v_vis, "loss_wm": v_wm, "loss": total,
            "grad_norm": raw_norm, **vis_stats, **wm_stats}


def train(model: GaussianModel, cameras, reference_images, decoder: Decoder,
          message: Message, mask: GroupMask, cfg: Config,
          plan_digest: str = "", threads: int = 1,
          callback=None):
    """Full finetuning run over ``epochs`` sweeps of the training views.

    ``reference_images`` are renders of the pre-embedding model, one per
    camera; the model is updated in place.  Returns a RunManifest.
    """
    if len(cameras) != len(reference_images):
        raise TrainingError("need one reference image per camera")
    if not len(model.wm_indices):
        warnings.warn("no carrier Gaussians; watermark pass is a no-op")

    tcfg = cfg.train
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState.for_model(model)
    manifest = RunManifest(
        config=cfg.to_dict(), plan_digest=plan_digest,
        decoder_hash=decoder.state_hash(), message_hex=message.to_hex(),
        mask_wm=[float(x) for x in np.atleast_1d(mask.m_wm).ravel()[:5]],
        mask_vis=[float(x) for x in np.atleast_1d(mask.m_vis).ravel()[:5]],
        n_gaussians=len(model), n_carriers=len(model.wm_indices),
        n_views=len(cameras))

    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(tcfg.epochs):
            for ci, cam in enumerate(cameras):
                stats = train_step(model, cam, reference_images[ci],
                                   decoder, message, mask, cfg, state,
                                   rng, threads=threads)
                step += 1
                if step % tcfg.log_every == 0 or step == 1:
                    manifest.log.append(
                        {"step": step, "epoch": epoch,
                         **{k: float(v) for k, v in stats.items()}})
                if callback is not None:
                    callback(step, stats)
    except TrainingError as exc:
        manifest.aborted = str(exc)
        raise
    finally:
        manifest.steps = step
        manifest.wall_seconds = time.perf_counter() - t0
    return manifest
