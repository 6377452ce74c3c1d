"""Evaluation harness: synthetic scenes, model-space attacks, and the
image-space attack matrix.

All randomness is seeded; every attack-matrix row derives its own
generator from (seed, attack name) so rows are reproducible in isolation.
"""

from __future__ import annotations

import csv
import hashlib

import numpy as np

from gsmark import codec, metrics
from gsmark.codec import Decoder, DistortionSpec, Message
from gsmark.config import CodecConfig, ConfigurationError, EvalConfig
from gsmark.model import (Camera, ContractViolation, GaussianModel, logit,
                          normalize_quaternions, sigmoid)
from gsmark.render import render

MODEL_ATTACKS = ("remove", "clone", "param_noise")


def make_synthetic_scene(n_gaussians: int = 400, n_cameras: int = 12,
                         resolution: int = 64, seed: int = 0,
                         sh_degree: int = 3, n_clusters: int = 6,
                         scale_range: tuple = (0.05, 0.15),
                         anisotropy_fraction: float = 0.0,
                         color_spread: float = 0.6,
                         rig: str = "ring"):
    """Deterministic clustered test scene plus a camera rig around it.

    Gaussians are grouped into soft blobs near the origin with varied
    scale and opacity.  ``rig`` picks the camera layout: "ring" orbits
    the scene, "arc" is a forward-facing sweep whose trailing cameras
    (the usual holdout) sit at interior arc positions so held-out views
    interpolate, not extrapolate, the training views.
    Returns (model, cameras).
    """
    if n_gaussians < n_clusters:
        raise ContractViolation("need at least one Gaussian per cluster")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-0.5, 0.5, (n_clusters, 3))
    assign = rng.integers(0, n_clusters, n_gaussians)
    positions = centers[assign] + 0.33 * rng.standard_normal((n_gaussians, 3))

    scales = np.exp(rng.uniform(np.log(scale_range[0]),
                                np.log(scale_range[1]), (n_gaussians, 3)))
    aniso = rng.random(n_gaussians) < anisotropy_fraction
    scales[aniso, 0] *= rng.uniform(2.0, 4.0, aniso.sum())
    rotations = normalize_quaternions(rng.standard_normal((n_gaussians, 4)))
    opacities = rng.uniform(0.4, 0.9, n_gaussians)

    base = rng.uniform(-color_spread, color_spread, (n_clusters, 3))
    sh_dc = base[assign] + 0.15 * rng.standard_normal((n_gaussians, 3))
    n_rest = (sh_degree + 1) ** 2 - 1
    sh_rest = 0.02 * rng.standard_normal((n_gaussians, n_rest, 3))

    model = GaussianModel(positions=positions, scales=scales,
                          rotations=rotations, opacities=opacities,
                          sh_dc=sh_dc, sh_rest=sh_rest,
                          sh_degree=sh_degree)
    if rig == "arc":
        cameras = forward_facing_rig(n_cameras, resolution)
    elif rig == "ring":
        cameras = camera_ring(n_cameras, resolution)
    else:
        raise ConfigurationError(f"unknown camera rig {rig!r}")
    return model, cameras


def camera_ring(n_cameras: int, resolution: int, radius: float = 2.5,
                elevation: float = 0.35) -> list:
    """Evenly spaced look-at cameras orbiting the origin."""
    cams = []
    f = 1.2 * resolution
    for i in range(n_cameras):
        theta = 2.0 * np.pi * i / n_cameras
        eye = np.array([radius * np.cos(theta), radius * np.sin(theta),
                        radius * np.sin(elevation)])
        forward = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, forward])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        cams.append(Camera(world_to_camera=w2c, fx=f, fy=f,
                           cx=resolution / 2.0, cy=resolution / 2.0,
                           width=resolution, height=resolution))
    return cams


def _arc_camera(theta: float, resolution: int, radius: float) -> Camera:
    f = 1.2 * resolution
    eye = np.array([radius * np.sin(theta), -radius * np.cos(theta),
                    0.3 * np.sin(3.0 * theta)])
    forward = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, forward])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return Camera(world_to_camera=w2c, fx=f, fy=f,
                  cx=resolution / 2.0, cy=resolution / 2.0,
                  width=resolution, height=resolution)


def forward_facing_rig(n_cameras: int, resolution: int, arc: float = 1.2,
                       radius: float = 2.5,
                       holdout_fraction: float = 0.2) -> list:
    """Forward-facing cameras sweeping an arc, holdout views interior.

    The leading cameras span the arc evenly; the trailing
    ``holdout_fraction`` sit at evenly spaced positions strictly inside
    the sweep, so the standard "last views" holdout evaluates
    interpolated viewpoints instead of extrapolated ones.
    """
    n_eval = max(1, int(round(holdout_fraction * n_cameras)))
    n_train = n_cameras - n_eval
    if n_train < 2:
        raise ConfigurationError("arc rig needs at least two leading views")
    thetas = [-arc / 2 + arc * i / (n_train - 1) for i in range(n_train)]
    thetas += [-arc / 2 + arc * (j + 1) / (n_eval + 1)
               for j in range(n_eval)]
    return [_arc_camera(theta, resolution, radius) for theta in thetas]


def split_views(cameras, holdout_fraction: float = 0.2):
    """(train, eval) view split; eval takes the last fraction of the ring."""
    n = len(cameras)
    n_eval = max(1, int(round(holdout_fraction * n)))
    if n_eval >= n:
        raise ConfigurationError("holdout fraction leaves no training views")
    return cameras[:n - n_eval], cameras[n - n_eval:]


# ---------------------------------------------------------------------------
# Model-space attacks
# ---------------------------------------------------------------------------

def model_attack(model: GaussianModel, kind: str, strength: float,
                 rng) -> GaussianModel:
    """Adversarial model edits with no knowledge of carrier labels.

    remove: delete a random fraction of Gaussians.
    clone: duplicate a random fraction with small positional jitter.
    param_noise: Gaussian noise of the given scale on all non-position
    parameters, applied in pre-activation space.
    """
    if kind not in MODEL_ATTACKS:
        raise ConfigurationError(f"unknown model attack {kind!r}")
    if not 0 <= strength <= 1:
        raise ConfigurationError("attack strength must be in [0, 1]")
    n = len(model)
    out = model.copy()

    if kind == "remove":
        k = int(round(strength * n))
        drop = rng.choice(n, size=k, replace=False)
        keep = np.setdiff1d(np.arange(n), drop)
        return out.subset(keep)

    if kind == "clone":
        k = int(round(strength * n))
        picks = rng.choice(n, size=k, replace=False)
        dup = out.subset(np.sort(picks))
        dup.positions = dup.positions + 0.01 * rng.standard_normal(
            dup.positions.shape)
        return GaussianModel(
            positions=np.concatenate([out.positions, dup.positions]),
            scales=np.concatenate([out.scales, dup.scales]),
            rotations=np.concatenate([out.rotations, dup.rotations]),
            opacities=np.concatenate([out.opacities, dup.opacities]),
            sh_dc=np.concatenate([out.sh_dc, dup.sh_dc]),
            sh_rest=np.concatenate([out.sh_rest, dup.sh_rest]),
            roles=np.concatenate([out.roles, dup.roles]),
            sh_degree=out.sh_degree)

    s = strength
    out.sh_dc = out.sh_dc + s * rng.standard_normal(out.sh_dc.shape)
    out.sh_rest = out.sh_rest + s * rng.standard_normal(out.sh_rest.shape)
    out.opacities = sigmoid(logit(np.clip(out.opacities, 1e-6, 1 - 1e-6))
                            + s * rng.standard_normal(n))
    out.scales = np.exp(np.log(out.scales)
                        + s * rng.standard_normal(out.scales.shape))
    out.rotations = normalize_quaternions(
        out.rotations + s * rng.standard_normal(out.rotations.shape))
    return out


# ---------------------------------------------------------------------------
# Image-space attack matrix
# ---------------------------------------------------------------------------

def _row_rng(seed: int, name: str):
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def decode_views(decoder: Decoder, images) -> np.ndarray:
    """View-aggregated logits for a list of rendered images."""
    return codec.aggregate_logits([codec.decode(decoder, img)
                                   for img in images])


def evaluate_images(decoder: Decoder, message: Message, images,
                    references) -> dict:
    logits = decode_views(decoder, images)
    return {
        "bit_acc": codec.bit_accuracy(logits, message),
        "psnr": float(np.mean([metrics.psnr(a, b)
                               for a, b in zip(images, references)])),
        "ssim": float(np.mean([metrics.ssim(a, b)
                               for a, b in zip(images, references)])),
    }


def attack_rows(codec_cfg: CodecConfig, eval_cfg: EvalConfig):
    """(name, [DistortionSpec]) rows: none, each single distortion, and
    the combined chain."""
    rows = [("none", [])]
    for kind in codec_cfg.eot_kinds:
        rows.append((kind, [DistortionSpec.default_for(kind,
                                                       cfg=codec_cfg)]))
    chain = [DistortionSpec.default_for(kind, cfg=codec_cfg)
             for kind in eval_cfg.combined_order]
    rows.append(("combined", chain))
    return rows


def _row_param(specs) -> str:
    if not specs:
        return "-"
    parts = []
    for s in specs:
        value = {"noise": s.sigma, "blur": s.sigma,
                 "rotation": s.angle_range, "scaling": s.factor,
                 "crop": s.keep_fraction, "jpeg": s.quality}[s.kind]
        parts.append(f"{s.kind}={value}")
    return "|".join(parts)


def run_attack_matrix(model: GaussianModel, cameras, decoder: Decoder,
                      message: Message, references=None, seed: int = 0,
                      codec_cfg: CodecConfig | None = None,
                      eval_cfg: EvalConfig | None = None,
                      threads: int = 1):
    """Render the eval views once, then decode under each attack row.

    Returns a list of dicts with keys attack, param, bit_acc, psnr, ssim.
    Fidelity metrics always compare the clean renders against
    ``references`` (the pre-embedding renders) when given, else against
    themselves.
    """
    codec_cfg = codec_cfg or CodecConfig()
    eval_cfg = eval_cfg or EvalConfig()
    clean = [render(model, cam, threads=threads).image for cam in cameras]
    refs = references if references is not None else clean

    results = []
    for name, specs in attack_rows(codec_cfg, eval_cfg):
        rng = _row_rng(seed, name)
        attacked = []
        for img in clean:
            for spec in specs:
                img = codec.apply_distortion(img, spec, rng)
            attacked.append(img)
        logits = decode_views(decoder, attacked)
        results.append({
            "attack": name,
            "param": _row_param(specs),
            "bit_acc": codec.bit_accuracy(logits, message),
            "psnr": float(np.mean([metrics.psnr(a, b)
                                   for a, b in zip(clean, refs)])),
            "ssim": float(np.mean([metrics.ssim(a, b)
                                   for a, b in zip(clean, refs)])),
        })
    return results


def write_attack_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["attack", "param", "bit_acc", "psnr", "ssim"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row,
                             "bit_acc": f"{row['bit_acc']:.6f}",
                             "psnr": f"{row['psnr']:.4f}",
                             "ssim": f"{row['ssim']:.6f}"})
