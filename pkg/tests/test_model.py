"""Model container, activations, covariance, and file I/O."""

import numpy as np
import pytest

from conftest import random_model
from gsmark.evalkit import camera_ring
from gsmark.model import (Camera, ContractViolation, DataError, GaussianModel,
                          ParseError, Role, camera_from_c2w, covariance,
                          load_cameras, load_model, load_ply, load_roles,
                          logit, normalize_quaternions, quat_to_rotmat,
                          roles_sidecar_path, save_cameras, save_ply,
                          save_roles, sigmoid)


def test_sigmoid_logit_inverse(rng):
    p = rng.uniform(0.01, 0.99, 100)
    assert np.allclose(sigmoid(logit(p)), p, atol=1e-12)
    z = rng.uniform(-8, 8, 100)
    assert np.allclose(logit(sigmoid(z)), z, atol=1e-9)


def test_normalize_quaternions_unit_and_degenerate(rng):
    q = normalize_quaternions(rng.standard_normal((50, 4)))
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    bad = np.array([[1.0, 0, 0, 0], [1e-12, 0, 0, 0]])
    with pytest.raises(DataError):
        normalize_quaternions(bad)


def test_quat_to_rotmat_orthogonal(rng):
    q = normalize_quaternions(rng.standard_normal((20, 4)))
    R = quat_to_rotmat(q)
    eye = np.eye(3)
    for m in R:
        assert np.allclose(m @ m.T, eye, atol=1e-12)
        assert np.isclose(np.linalg.det(m), 1.0, atol=1e-12)


def test_covariance_eigenvalue_oracle(rng):
    # Eigenvalues of R diag(s)^2 R^T are exactly the squared scales.
    for _ in range(10):
        s = rng.uniform(0.1, 2.0, 3)
        q = normalize_quaternions(rng.standard_normal(4))
        cov = covariance(s, q)
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.allclose(np.sort(np.linalg.eigvalsh(cov)),
                           np.sort(s ** 2), rtol=1e-9)


def test_covariance_rejects_bad_inputs():
    with pytest.raises(ContractViolation):
        covariance(np.array([1.0, -1.0, 1.0]), np.array([1.0, 0, 0, 0]))
    with pytest.raises(ContractViolation):
        covariance(np.ones(3), np.array([2.0, 0, 0, 0]))


def test_model_validate_and_roles(rng):
    model = random_model(rng, 10)
    model.validate()
    model.roles[2] = Role.WM
    model.roles[5] = Role.VIS
    assert list(model.wm_indices) == [2]
    assert list(model.vis_indices) == [5]
    model.validate()
    with pytest.raises(ContractViolation):
        GaussianModel(positions=np.zeros((2, 3)), scales=np.ones((2, 3)),
                      rotations=np.array([[1.0, 0, 0, 0]] * 2),
                      opacities=np.full(2, 0.5), sh_dc=np.zeros((2, 3)),
                      sh_rest=np.zeros((2, 5, 3)), sh_degree=3)


def test_subset_and_copy_independent(rng):
    model = random_model(rng, 8)
    sub = model.subset([1, 3, 5])
    assert len(sub) == 3
    assert np.array_equal(sub.positions, model.positions[[1, 3, 5]])
    dup = model.copy()
    dup.sh_dc += 1.0
    assert not np.allclose(dup.sh_dc, model.sh_dc)


def test_ply_roundtrip(tmp_path, rng):
    model = random_model(rng, 25)
    model.roles[3] = Role.WM
    model.roles[7] = Role.VIS
    path = tmp_path / "model.ply"
    save_ply(model, path)
    back = load_model(path)
    assert len(back) == 25
    assert back.sh_degree == 3
    # Values survive the f32 quantization of the interchange format.
    assert np.allclose(back.positions, model.positions, atol=1e-6)
    assert np.allclose(back.sh_dc, model.sh_dc, atol=1e-6)
    assert np.allclose(back.sh_rest, model.sh_rest, atol=1e-6)
    assert np.allclose(back.scales, model.scales, rtol=1e-5)
    assert np.allclose(back.opacities, model.opacities, atol=1e-5)
    dots = np.abs(np.sum(back.rotations * model.rotations, axis=1))
    assert np.allclose(dots, 1.0, atol=1e-9)
    assert np.array_equal(back.roles, model.roles)


def test_ply_save_is_stable(tmp_path, rng):
    # Saving what was just loaded reproduces the same file bytes for the
    # linear fields and keeps all fields within f32 noise.
    model = random_model(rng, 10)
    p1 = tmp_path / "a.ply"
    p2 = tmp_path / "b.ply"
    save_ply(model, p1)
    save_ply(load_model(p1), p2)
    m1, m2 = load_model(p1), load_model(p2)
    assert np.array_equal(m1.positions, m2.positions)
    assert np.array_equal(m1.sh_dc, m2.sh_dc)
    assert np.allclose(m1.scales, m2.scales, rtol=1e-6)
    assert np.allclose(m1.opacities, m2.opacities, atol=1e-6)


def test_roles_sidecar(tmp_path):
    roles = np.array([0, 1, 2, 0, 1], dtype=np.int8)
    path = tmp_path / "m.ply.roles.txt"
    save_roles(roles, path)
    assert np.array_equal(load_roles(path, 5), roles)
    path.write_text("0:wm\n9:vis\n")
    with pytest.raises(DataError):
        load_roles(path, 5)
    path.write_text("0:banana\n")
    with pytest.raises(DataError):
        load_roles(path, 5)


def test_roles_sidecar_path_convention(tmp_path):
    assert str(roles_sidecar_path(tmp_path / "x.ply")).endswith(
        "x.ply.roles.txt")


def test_load_ply_error_paths(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"hello world")
    with pytest.raises(ParseError):
        load_ply(p)
    p.write_bytes(b"nonsense\nformat binary_little_endian 1.0\n"
                  b"end_header\n")
    with pytest.raises(ParseError):
        load_ply(p)
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(ParseError):
        load_ply(p)


def test_load_ply_rejects_nonfinite(tmp_path, rng):
    model = random_model(rng, 4)
    path = tmp_path / "m.ply"
    save_ply(model, path)
    raw = bytearray(path.read_bytes())
    body_at = raw.find(b"end_header\n") + len(b"end_header\n")
    raw[body_at:body_at + 4] = np.array([np.nan], dtype="<f4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_ply(path)


def test_camera_center_and_validation():
    c2w = np.eye(4)
    c2w[:3, 3] = [1.0, 2.0, 3.0]
    cam = camera_from_c2w(c2w, 100, 100, 16, 16, 32, 32)
    assert np.allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)
    with pytest.raises(ContractViolation):
        Camera(world_to_camera=np.eye(4), fx=-1, fy=1, cx=16, cy=16,
               width=32, height=32)
    with pytest.raises(ContractViolation):
        Camera(world_to_camera=np.eye(4), fx=1, fy=1, cx=40, cy=16,
               width=32, height=32)


def test_camera_json_roundtrip(tmp_path):
    cams = camera_ring(5, 64)
    path = tmp_path / "cameras.json"
    save_cameras(cams, path)
    back = load_cameras(path)
    assert len(back) == 5
    for a, b in zip(cams, back):
        assert np.allclose(a.world_to_camera, b.world_to_camera, atol=1e-9)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == \
            (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_camera_json_errors(tmp_path):
    path = tmp_path / "cams.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_cameras(path)
    path.write_text('{"views": []}')
    with pytest.raises(ParseError):
        load_cameras(path)
    path.write_text('{"frames": [{"fl_x": 1.0}]}')
    with pytest.raises(ParseError):
        load_cameras(path)
