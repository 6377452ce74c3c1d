"""Gaussian primitive model, activations, covariance, and file I/O.

The model stores *activated* parameters (positive scales, opacities in
(0,1), unit quaternions).  PLY files use the standard 3D-GS interchange
layout: log-scales, logit-opacities, raw quaternions, and channel-major
``f_rest`` coefficients.  Role labels never enter the PLY; they live in a
plain-text sidecar next to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed model or camera file."""


class DataError(ValueError):
    """Structurally valid file with invalid values (NaN, degenerate quat)."""


class ContractViolation(ValueError):
    """An operation precondition was violated."""


class Role(IntEnum):
    NEUTRAL = 0
    WM = 1
    VIS = 2


_ROLE_NAMES = {Role.NEUTRAL: "neutral", Role.WM: "wm", Role.VIS: "vis"}
_ROLE_FROM_NAME = {v: k for k, v in _ROLE_NAMES.items()}

OPACITY_GUARD = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q, tol=1e-8):
    """Return unit quaternions; reject degenerate rows outright."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(norms < tol):
        bad = int(np.argmin(norms))
        raise DataError(f"degenerate quaternion at index {bad} "
                        f"(norm {norms.flat[bad]:.3e})")
    return q / norms[..., None]


def quat_to_rotmat(q):
    """Rotation matrices from unit quaternions (w, x, y, z), shape (...,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance(scale, rotation, tol=1e-6):
    """3x3 SPD covariance R diag(s)^2 R^T from scale and unit quaternion."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.any(scale <= 0):
        raise ContractViolation("scale components must be strictly positive")
    norm = np.linalg.norm(rotation, axis=-1)
    if np.any(np.abs(norm - 1.0) > tol):
        raise ContractViolation("rotation quaternion is not unit length")
    R = quat_to_rotmat(rotation)
    D = scale[..., None, :] ** 2 * np.eye(3)
    return R @ D @ np.swapaxes(R, -1, -2)


def _n_rest_coeffs(sh_degree: int) -> int:
    return (sh_degree + 1) ** 2 - 1


@dataclass
class GaussianModel:
    """Struct-of-arrays collection of Gaussian primitives plus role labels."""

    positions: np.ndarray   # (N, 3)
    scales: np.ndarray      # (N, 3), activated (> 0)
    rotations: np.ndarray   # (N, 4), unit quaternions (w, x, y, z)
    opacities: np.ndarray   # (N,), activated, in (0, 1)
    sh_dc: np.ndarray       # (N, 3)
    sh_rest: np.ndarray     # (N, n_rest, 3)
    roles: np.ndarray = field(default=None)   # (N,), int8 Role values
    sh_degree: int = 3

    def __post_init__(self):
        n = len(self.positions)
        if self.roles is None:
            self.roles = np.zeros(n, dtype=np.int8)
        for name in ("positions", "scales", "rotations", "opacities",
                     "sh_dc", "sh_rest"):
            setattr(self, name, np.asarray(getattr(self, name),
                                           dtype=np.float64))
        self.roles = np.asarray(self.roles, dtype=np.int8)
        if len(self.roles) != n:
            raise ContractViolation("roles length must match gaussian count")
        n_rest = _n_rest_coeffs(self.sh_degree)
        if self.sh_rest.shape != (n, n_rest, 3):
            raise ContractViolation(
                f"sh_rest shape {self.sh_rest.shape} does not match "
                f"degree {self.sh_degree} (expected {(n, n_rest, 3)})")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def wm_indices(self) -> np.ndarray:
        return np.flatnonzero(self.roles == Role.WM)

    @property
    def vis_indices(self) -> np.ndarray:
        return np.flatnonzero(self.roles == Role.VIS)

    def validate(self) -> None:
        if np.any(self.scales <= 0):
            raise ContractViolation("non-positive scale")
        if np.any((self.opacities <= 0) | (self.opacities >= 1)):
            raise ContractViolation("opacity outside (0, 1)")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractViolation("non-unit quaternion")
        if np.intersect1d(self.wm_indices, self.vis_indices).size:
            raise ContractViolation("WM and VIS role sets overlap")

    def copy(self) -> "GaussianModel":
        return GaussianModel(
            positions=self.positions.copy(), scales=self.scales.copy(),
            rotations=self.rotations.copy(), opacities=self.opacities.copy(),
            sh_dc=self.sh_dc.copy(), sh_rest=self.sh_rest.copy(),
            roles=self.roles.copy(), sh_degree=self.sh_degree)

    def subset(self, indices) -> "GaussianModel":
        idx = np.asarray(indices)
        return GaussianModel(
            positions=self.positions[idx], scales=self.scales[idx],
            rotations=self.rotations[idx], opacities=self.opacities[idx],
            sh_dc=self.sh_dc[idx], sh_rest=self.sh_rest[idx],
            roles=self.roles[idx], sh_degree=self.sh_degree)

    @staticmethod
    def empty(sh_degree: int = 3) -> "GaussianModel":
        n_rest = _n_rest_coeffs(sh_degree)
        return GaussianModel(
            positions=np.zeros((0, 3)), scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)), opacities=np.zeros(0),
            sh_dc=np.zeros((0, 3)), sh_rest=np.zeros((0, n_rest, 3)),
            roles=np.zeros(0, dtype=np.int8), sh_degree=sh_degree)


@dataclass
class Camera:
    """Pinhole camera; world_to_camera maps world points into a frame with
    x right, y down, z forward."""

    world_to_camera: np.ndarray   # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera,
                                          dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ContractViolation("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        R = self.world_to_camera[:3, :3]
        t = self.world_to_camera[:3, 3]
        return -R.T @ t


# ---------------------------------------------------------------------------
# PLY I/O
# ---------------------------------------------------------------------------

def _ply_property_names(sh_degree: int):
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * _n_rest_coeffs(sh_degree))]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def _infer_sh_degree(props):
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    for deg in range(4):
        if n_rest == 3 * _n_rest_coeffs(deg):
            return deg
    raise ParseError(f"unsupported f_rest property count {n_rest}")


def load_ply(path) -> GaussianModel:
    """Load a binary little-endian 3D-GS PLY and apply activations."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    if not header or header[0].strip() != "ply":
        raise ParseError("not a PLY file")
    fmt = next((h for h in header if h.startswith("format")), "")
    if "binary_little_endian" not in fmt:
        raise ParseError("expected binary little-endian PLY")

    count = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] != "float":
                raise ParseError(f"unsupported property type {parts[1]}")
            props.append(parts[2])
    if count is None:
        raise ParseError("missing vertex element")

    sh_degree = _infer_sh_degree(props)
    required = _ply_property_names(sh_degree)
    missing = [p for p in required if p not in props]
    if missing:
        raise ParseError(f"missing property {missing[0]}")

    data = np.frombuffer(body, dtype="<f4", count=count * len(props))
    data = data.reshape(count, len(props)).astype(np.float64)
    col = {name: data[:, i] for i, name in enumerate(props)}

    if count:
        stacked = np.stack([col[p] for p in required], axis=1)
        bad = np.flatnonzero(~np.isfinite(stacked).all(axis=1))
        if bad.size:
            raise DataError(f"non-finite field at vertex {bad[0]}")

    n_rest = _n_rest_coeffs(sh_degree)
    positions = np.stack([col["x"], col["y"], col["z"]], axis=1)
    sh_dc = np.stack([col[f"f_dc_{i}"] for i in range(3)], axis=1)
    if n_rest:
        rest = np.stack([col[f"f_rest_{i}"] for i in range(3 * n_rest)],
                        axis=1)
        # channel-major on disk: (N, 3, n_rest) -> (N, n_rest, 3)
        sh_rest = rest.reshape(count, 3, n_rest).transpose(0, 2, 1)
    else:
        sh_rest = np.zeros((count, 0, 3))
    scales = np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], axis=1))
    opacities = sigmoid(col["opacity"])
    rotations = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1)
    if count:
        rotations = normalize_quaternions(rotations)

    return GaussianModel(
        positions=positions, scales=scales, rotations=rotations,
        opacities=opacities, sh_dc=sh_dc, sh_rest=sh_rest,
        roles=np.zeros(count, dtype=np.int8), sh_degree=sh_degree)


def save_ply(model: GaussianModel, path) -> None:
    """Write the model with inverse activations; roles go to a sidecar."""
    path = Path(path)
    n = len(model)
    props = _ply_property_names(model.sh_degree)
    n_rest = _n_rest_coeffs(model.sh_degree)

    columns = [model.positions[:, 0], model.positions[:, 1],
               model.positions[:, 2]]
    columns += [model.sh_dc[:, i] for i in range(3)]
    if n_rest:
        rest = model.sh_rest.transpose(0, 2, 1).reshape(n, 3 * n_rest)
        columns += [rest[:, i] for i in range(3 * n_rest)]
    op = np.clip(model.opacities, OPACITY_GUARD, 1 - OPACITY_GUARD)
    columns += [logit(op)]
    columns += [np.log(model.scales[:, i]) for i in range(3)]
    columns += [model.rotations[:, i] for i in range(4)]

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header"]

    body = np.stack(columns, axis=1).astype("<f4") if n else \
        np.zeros((0, len(props)), dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(body.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc
    save_roles(model.roles, roles_sidecar_path(path))


def roles_sidecar_path(ply_path) -> Path:
    return Path(str(ply_path) + ".roles.txt")


def save_roles(roles, path) -> None:
    lines = [f"{i}:{_ROLE_NAMES[Role(int(r))]}" for i, r in enumerate(roles)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_roles(path, n: int) -> np.ndarray:
    roles = np.zeros(n, dtype=np.int8)
    text = Path(path).read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        idx, _, name = line.partition(":")
        i = int(idx)
        if not 0 <= i < n:
            raise DataError(f"role index {i} out of range")
        try:
            roles[i] = _ROLE_FROM_NAME[name.strip()]
        except KeyError:
            raise DataError(f"unknown role {name!r}") from None
    return roles


def load_model(ply_path) -> GaussianModel:
    """Load a PLY plus its role sidecar when present."""
    model = load_ply(ply_path)
    sidecar = roles_sidecar_path(ply_path)
    if sidecar.exists():
        model.roles = load_roles(sidecar, len(model))
    return model


# ---------------------------------------------------------------------------
# Cameras (Blender-synthetic transforms convention)
# ---------------------------------------------------------------------------

_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def camera_from_c2w(c2w, fx, fy, cx, cy, width, height) -> Camera:
    """Build a Camera from an OpenGL-style camera-to-world transform."""
    c2w = np.asarray(c2w, dtype=np.float64)
    w2c = _GL_TO_CV @ np.linalg.inv(c2w)
    return Camera(world_to_camera=w2c, fx=fx, fy=fy, cx=cx, cy=cy,
                  width=int(width), height=int(height))


def load_cameras(path) -> list[Camera]:
    """Load a transforms-style JSON camera file (one record per view)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid camera file: {exc}") from exc
    frames = doc.get("frames")
    if frames is None:
        raise ParseError("camera file missing 'frames'")
    cams = []
    for i, fr in enumerate(frames):
        rec = {**doc, **fr}
        try:
            cams.append(camera_from_c2w(
                np.array(rec["transform_matrix"], dtype=np.float64),
                rec["fl_x"], rec["fl_y"], rec["cx"], rec["cy"],
                rec["w"], rec["h"]))
        except KeyError as exc:
            raise ParseError(f"frame {i} missing field {exc}") from exc
    return cams


def save_cameras(cameras: list[Camera], path) -> None:
    frames = []
    for cam in cameras:
        c2w = np.linalg.inv(_GL_TO_CV @ cam.world_to_camera)
        frames.append({
            "transform_matrix": c2w.tolist(),
            "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "w": cam.width, "h": cam.height,
        })
    Path(path).write_text(json.dumps({"frames": frames}, indent=1))
