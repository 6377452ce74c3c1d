"""Differentiable CPU rasterizer for Gaussian splats.

Forward: EWA-style projection, global depth sort, front-to-back alpha
compositing with per-pixel early termination, plus the per-Gaussian and
per-pixel compositing-weight accumulators the selection stage needs.

Backward: analytic gradients for the five gated channel groups
(dc color, higher-order SH, opacity, rotation, scale).  Positions are
frozen by design and have no backward path.

Rendering is decomposed into fixed horizontal pixel bands that are
independent under per-pixel compositing; bands may be processed by a
thread pool but are always merged in band order, so results are bitwise
identical for any thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from gsmark.model import (Camera, ContractViolation, GaussianModel,
                          quat_to_rotmat)

CHANNEL_GROUPS = ("dc", "rest", "opa", "rot", "sca")

NEAR_PLANE = 0.01
DILATION = 0.3          # low-pass dilation added to cov2d (px^2)
ALPHA_MAX = 0.999
ALPHA_MIN = 1e-10       # footprint truncation, kept tiny for smoothness
T_MIN = 1e-4            # per-pixel early termination
BAND_ROWS = 16

# Real SH basis constants (degree <= 3).
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (N, (deg+1)^2)."""
    n = len(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = _C0
    if degree >= 1:
        out[:, 1] = -_C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _C2[0] * x * y
        out[:, 5] = _C2[1] * y * z
        out[:, 6] = _C2[2] * (2 * zz - xx - yy)
        out[:, 7] = _C2[3] * x * z
        out[:, 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _C3[0] * y * (3 * xx - yy)
        out[:, 10] = _C3[1] * x * y * z
        out[:, 11] = _C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _C3[5] * z * (xx - yy)
        out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    return out


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_base: float


@dataclass
class Projection:
    """Vectorized projection of every Gaussian into one view."""

    valid: np.ndarray      # (N,) bool
    depth: np.ndarray      # (N,)
    mean2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray      # (N, 2, 2)
    conic: np.ndarray      # (N, 3) inverse cov2d as (a, b, c)
    radius: np.ndarray     # (N,) 3-sigma extent in pixels
    jw: np.ndarray         # (N, 2, 3) combined projection Jacobian J @ W
    color: np.ndarray      # (N, 3) clipped SH color
    color_mask: np.ndarray  # (N, 3) 1 where color unsaturated
    basis: np.ndarray      # (N, n_basis) SH basis at the view direction
    order: np.ndarray      # indices of valid splats sorted by (depth, index)


@dataclass
class RenderOutput:
    image: np.ndarray             # (H, W, 3) in [0, 1]
    weight_sum: np.ndarray        # (N,)
    pixel_weight_sum: np.ndarray  # (H, W)
    pixel_weight_sat: np.ndarray  # (H, W)


@dataclass
class GradientSet:
    """Per-Gaussian gradients for the five channel groups."""

    sh_dc: np.ndarray
    sh_rest: np.ndarray
    opacity: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray

    @staticmethod
    def zeros(model: GaussianModel) -> "GradientSet":
        return GradientSet(
            sh_dc=np.zeros_like(model.sh_dc),
            sh_rest=np.zeros_like(model.sh_rest),
            opacity=np.zeros_like(model.opacities),
            rotation=np.zeros_like(model.rotations),
            scale=np.zeros_like(model.scales))

    def group(self, name: str) -> np.ndarray:
        return getattr(self, _GROUP_ATTR[name])

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(*(factor * g for g in self._arrays()))

    def add(self, other: "GradientSet") -> None:
        self.sh_dc += other.sh_dc
        self.sh_rest += other.sh_rest
        self.opacity += other.opacity
        self.rotation += other.rotation
        self.scale += other.scale

    def _arrays(self):
        return (self.sh_dc, self.sh_rest, self.opacity, self.rotation,
                self.scale)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self._arrays())))


_GROUP_ATTR = {"dc": "sh_dc", "rest": "sh_rest", "opa": "opacity",
               "rot": "rotation", "sca": "scale"}


def compute_colors(model: GaussianModel, camera: Camera, dc_only=False):
    """SH colors at the view direction: (color, saturation mask, basis)."""
    n = len(model)
    degree = 0 if dc_only else model.sh_degree
    if n == 0:
        return (np.zeros((0, 3)), np.zeros((0, 3)),
                np.zeros((0, (degree + 1) ** 2)))
    d = model.positions - camera.center
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    basis = sh_basis(d / norm, degree)
    raw = 0.5 + _C0 * model.sh_dc
    if degree >= 1:
        raw = raw + np.einsum("nk,nkc->nc", basis[:, 1:],
                              model.sh_rest[:, :basis.shape[1] - 1])
    mask = ((raw > 0) & (raw < 1)).astype(np.float64)
    return np.clip(raw, 0.0, 1.0), mask, basis


def project_model(model: GaussianModel, camera: Camera,
                  dc_only=False) -> Projection:
    """Project every Gaussian; culled entries are marked invalid."""
    n = len(model)
    W2C = camera.world_to_camera
    Rw = W2C[:3, :3]
    pos_cam = model.positions @ Rw.T + W2C[:3, 3]
    depth = pos_cam[:, 2]
    valid = depth > NEAR_PLANE

    tz = np.where(valid, depth, 1.0)
    mean2d = np.stack([camera.fx * pos_cam[:, 0] / tz + camera.cx,
                       camera.fy * pos_cam[:, 1] / tz + camera.cy], axis=1)

    # Affine approximation: J rows scaled by focal lengths.
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * pos_cam[:, 0] / tz ** 2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * pos_cam[:, 1] / tz ** 2
    jw = J @ Rw

    Rq = quat_to_rotmat(model.rotations /
                        np.linalg.norm(model.rotations, axis=1,
                                       keepdims=True))
    RS = Rq * model.scales[:, None, :]
    cov3d = RS @ RS.transpose(0, 2, 1)
    cov2d = jw @ cov3d @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(det > 1e-12, det, 1e-12)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b,
                                                 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    inside = ((mean2d[:, 0] + radius > 0) &
              (mean2d[:, 0] - radius < camera.width) &
              (mean2d[:, 1] + radius > 0) &
              (mean2d[:, 1] - radius < camera.height))
    valid &= inside

    color, color_mask, basis = compute_colors(model, camera, dc_only=dc_only)

    idx = np.flatnonzero(valid)
    order = idx[np.argsort(depth[idx], kind="stable")]
    return Projection(valid=valid, depth=depth, mean2d=mean2d, cov2d=cov2d,
                      conic=conic, radius=radius, jw=jw, color=color,
                      color_mask=color_mask, basis=basis, order=order)


def project(model: GaussianModel, index: int, camera: Camera):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    proj = project_model(model, camera)
    if not proj.valid[index]:
        return None
    return Splat2D(mean2d=proj.mean2d[index], cov2d=proj.cov2d[index],
                   depth=float(proj.depth[index]), color=proj.color[index],
                   alpha_base=float(model.opacities[index]))


def _bbox(mean2d, radius, width, y_lo, y_hi):
    x0 = max(int(np.floor(mean2d[0] - radius)), 0)
    x1 = min(int(np.ceil(mean2d[0] + radius)) + 1, width)
    y0 = max(int(np.floor(mean2d[1] - radius)), y_lo)
    y1 = min(int(np.ceil(mean2d[1] + radius)) + 1, y_hi)
    return x0, x1, y0, y1


def _patch_alpha(proj, i, opa, x0, x1, y0, y1):
    """Opacity field of splat i over an integer pixel patch."""
    xs = np.arange(x0, x1, dtype=np.float64) - proj.mean2d[i, 0]
    ys = np.arange(y0, y1, dtype=np.float64) - proj.mean2d[i, 1]
    ca, cb, cc = proj.conic[i]
    power = -0.5 * (ca * xs[None, :] ** 2 + cc * ys[:, None] ** 2) \
        - cb * ys[:, None] * xs[None, :]
    gauss = np.exp(power)
    alpha_raw = opa * gauss
    alpha = np.where(alpha_raw >= ALPHA_MIN,
                     np.minimum(alpha_raw, ALPHA_MAX), 0.0)
    return alpha, gauss, xs, ys


def _render_band(model, camera, proj, y_lo, y_hi, t_min):
    h, w = y_hi - y_lo, camera.width
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    pix_w = np.zeros((h, w))
    weight = np.zeros(len(model))
    for i in proj.order:
        x0, x1, y0, y1 = _bbox(proj.mean2d[i], proj.radius[i], w,
                               y_lo, y_hi)
        if x0 >= x1 or y0 >= y1:
            continue
        alpha, _, _, _ = _patch_alpha(proj, i, model.opacities[i],
                                      x0, x1, y0, y1)
        tp = trans[y0 - y_lo:y1 - y_lo, x0:x1]
        contrib = alpha * tp * (tp >= t_min)
        image[y0 - y_lo:y1 - y_lo, x0:x1] += \
            contrib[:, :, None] * proj.color[i]
        pix_w[y0 - y_lo:y1 - y_lo, x0:x1] += contrib
        weight[i] += contrib.sum()
        tp *= 1.0 - alpha
    return image, pix_w, weight


def render(model: GaussianModel, camera: Camera, dc_only=False,
           threads: int = 1, t_min: float = T_MIN) -> RenderOutput:
    """Composite the model into one view with front-to-back alpha blending.

    Deterministic for fixed inputs regardless of ``threads``.
    """
    H, W = camera.height, camera.width
    out = RenderOutput(image=np.zeros((H, W, 3)),
                       weight_sum=np.zeros(len(model)),
                       pixel_weight_sum=np.zeros((H, W)),
                       pixel_weight_sat=np.zeros((H, W)))
    if len(model) == 0:
        return out
    proj = project_model(model, camera, dc_only=dc_only)
    bands = [(lo, min(lo + BAND_ROWS, H)) for lo in range(0, H, BAND_ROWS)]

    def run(band):
        return _render_band(model, camera, proj, band[0], band[1], t_min)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, bands))
    else:
        results = [run(b) for b in bands]

    for (lo, hi), (img, pw, ws) in zip(bands, results):
        out.image[lo:hi] = img
        out.pixel_weight_sum[lo:hi] = pw
        out.weight_sum += ws
    out.pixel_weight_sat = np.minimum(1.0, out.pixel_weight_sum)
    return out


def _quat_rotmat_vjp(q, dR):
    """VJP through the unit-quaternion rotation formula, with the
    normalization tangent projection applied."""
    w, x, y, z = q
    dq = np.empty(4)
    dq[0] = 2 * (-z * dR[0, 1] + y * dR[0, 2] + z * dR[1, 0]
                 - x * dR[1, 2] - y * dR[2, 0] + x * dR[2, 1])
    dq[1] = 2 * (y * dR[0, 1] + z * dR[0, 2] + y * dR[1, 0]
                 - 2 * x * dR[1, 1] - w * dR[1, 2] + z * dR[2, 0]
                 + w * dR[2, 1] - 2 * x * dR[2, 2])
    dq[2] = 2 * (-2 * y * dR[0, 0] + x * dR[0, 1] + w * dR[0, 2]
                 + x * dR[1, 0] + z * dR[1, 2] - w * dR[2, 0]
                 + z * dR[2, 1] - 2 * y * dR[2, 2])
    dq[3] = 2 * (-2 * z * dR[0, 0] - w * dR[0, 1] + x * dR[0, 2]
                 + w * dR[1, 0] - 2 * z * dR[1, 1] + y * dR[1, 2]
                 + x * dR[2, 0] + y * dR[2, 1])
    return dq - q * np.dot(q, dq)


def render_backward(model: GaussianModel, camera: Camera, dL_dimage,
                    channels=None, role_filter=None,
                    t_min: float = T_MIN) -> GradientSet:
    """Analytic backward pass through the compositing equation.

    Gradients are taken with respect to the activated parameters
    (opacity in (0,1), positive scales, unit quaternions in the tangent
    space of normalization).  Only Gaussians whose role is in
    ``role_filter`` and only ``channels`` groups are populated; all other
    entries are exactly zero.
    """
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
    H, W = camera.height, camera.width
    if dL_dimage.shape != (H, W, 3):
        raise ContractViolation(
            f"dL_dimage shape {dL_dimage.shape} != {(H, W, 3)}")
    if channels is None:
        channels = set(CHANNEL_GROUPS)
    else:
        channels = set(channels)
        unknown = channels - set(CHANNEL_GROUPS)
        if unknown:
            raise ContractViolation(f"unknown channel groups {unknown}")

    grads = GradientSet.zeros(model)
    if len(model) == 0:
        return grads

    proj = project_model(model, camera)
    final = render(model, camera, t_min=t_min).image

    need_cov = bool(channels & {"rot", "sca"})
    unit_q = model.rotations / np.linalg.norm(model.rotations, axis=1,
                                              keepdims=True)
    Rq = quat_to_rotmat(unit_q)

    trans = np.ones((H, W))
    c_acc = np.zeros((H, W, 3))
    for i in proj.order:
        x0, x1, y0, y1 = _bbox(proj.mean2d[i], proj.radius[i], W, 0, H)
        if x0 >= x1 or y0 >= y1:
            continue
        opa = model.opacities[i]
        alpha, gauss, xs, ys = _patch_alpha(proj, i, opa, x0, x1, y0, y1)
        tp = trans[y0:y1, x0:x1]
        active = (alpha > 0) & (tp >= t_min)
        wgt = alpha * tp * active
        g = dL_dimage[y0:y1, x0:x1]
        color = proj.color[i]

        dL_dc = np.einsum("yx,yxc->c", wgt, g)
        if "dc" in channels:
            grads.sh_dc[i] = _C0 * dL_dc * proj.color_mask[i]
        if "rest" in channels and model.sh_degree >= 1:
            masked = dL_dc * proj.color_mask[i]
            grads.sh_rest[i] = proj.basis[i, 1:, None] * masked[None, :]

        if channels & {"opa", "rot", "sca"}:
            c_here = c_acc[y0:y1, x0:x1]
            suffix = final[y0:y1, x0:x1] - (c_here + wgt[:, :, None] * color)
            dL_dalpha = active * (
                np.einsum("yxc,c->yx", g, color) * tp
                - np.einsum("yxc,yxc->yx", g, suffix) / (1.0 - alpha))
            unclamped = (opa * gauss) <= ALPHA_MAX
            dL_dalpha = dL_dalpha * unclamped
            if "opa" in channels:
                grads.opacity[i] = float(np.sum(dL_dalpha * gauss))
            if need_cov:
                dL_dpower = dL_dalpha * alpha
                gxx = -0.5 * np.sum(dL_dpower * xs[None, :] ** 2)
                gyy = -0.5 * np.sum(dL_dpower * ys[:, None] ** 2)
                gxy = -np.sum(dL_dpower * ys[:, None] * xs[None, :])
                dL_dconic = np.array([[gxx, 0.5 * gxy], [0.5 * gxy, gyy]])
                lam = np.array([[proj.conic[i, 0], proj.conic[i, 1]],
                                [proj.conic[i, 1], proj.conic[i, 2]]])
                dL_dcov2 = -lam @ dL_dconic @ lam
                A = proj.jw[i]
                dL_dcov3 = A.T @ dL_dcov2 @ A
                if "sca" in channels:
                    grads.scale[i] = 2.0 * model.scales[i] * np.diag(
                        Rq[i].T @ dL_dcov3 @ Rq[i])
                if "rot" in channels:
                    D = np.diag(model.scales[i] ** 2)
                    dL_dR = (dL_dcov3 + dL_dcov3.T) @ Rq[i] @ D
                    grads.rotation[i] = _quat_rotmat_vjp(unit_q[i], dL_dR)

        c_acc[y0:y1, x0:x1] += wgt[:, :, None] * color
        tp *= 1.0 - alpha

    if role_filter is not None:
        allowed = {int(r) for r in role_filter}
        keep = np.isin(model.roles, list(allowed)).astype(np.float64)
        grads.sh_dc *= keep[:, None]
        grads.sh_rest *= keep[:, None, None]
        grads.opacity *= keep
        grads.rotation *= keep[:, None]
        grads.scale *= keep[:, None]
    return grads


def contribution_maps(model: GaussianModel, camera: Camera,
                      indices) -> np.ndarray:
    """Per-pixel compositing weight map for each requested Gaussian.

    Entry [k, y, x] is alpha * transmittance of Gaussian indices[k] at
    pixel (y, x), exactly as the forward composite applies it, so the
    rendered image is linear in the per-Gaussian colors with these maps
    as coefficients.
    """
    height, width = camera.height, camera.width
    proj = project_model(model, camera)
    trans = np.ones((height, width))
    sel = {int(i): k for k, i in enumerate(indices)}
    maps = np.zeros((len(indices), height, width))
    for i in proj.order:
        x0, x1, y0, y1 = _bbox(proj.mean2d[i], proj.radius[i], width,
                               0, height)
        if x0 >= x1 or y0 >= y1:
            continue
        alpha, _, _, _ = _patch_alpha(proj, i, model.opacities[i],
                                      x0, x1, y0, y1)
        patch = trans[y0:y1, x0:x1]
        if int(i) in sel:
            maps[sel[int(i)], y0:y1, x0:x1] += alpha * patch * (patch >= T_MIN)
        patch *= 1.0 - alpha
    return maps


def visibility_stats(model: GaussianModel, cameras, eps: float = 1e-8,
                     threads: int = 1):
    """Per-Gaussian visibility, scene crowding factor, and mean visibility.

    Renders with DC color + opacity only; visibility is the max-normalized
    sum of compositing weights over all views.
    """
    if not cameras:
        raise ContractViolation("visibility_stats needs at least one camera")
    total = np.zeros(len(model))
    etas = []
    for cam in cameras:
        out = render(model, cam, dc_only=True, threads=threads)
        total += out.weight_sum
        denom = out.pixel_weight_sum.sum() + eps
        etas.append(out.pixel_weight_sat.sum() / denom)
    top = total.max() if len(model) else 0.0
    if top <= 0:
        warnings.warn("all compositing weights are zero; vacuous scene")
        return np.zeros(len(model)), 1.0, 0.0
    v = total / top
    eta = float(min(1.0, np.mean(etas)))
    return v, eta, float(v.mean())
