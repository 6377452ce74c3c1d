"""Rasterizer unit behavior: SH, projection, compositing accounting,
contribution maps, backward routing and error contracts."""

import numpy as np
import pytest

from conftest import random_model
from gsmark.evalkit import camera_ring
from gsmark.model import ContractViolation, GaussianModel, Role
from gsmark.render import (_C0, CHANNEL_GROUPS, GradientSet, compute_colors,
                           contribution_maps, render, render_backward,
                           sh_basis, visibility_stats)


def _camera(res=32):
    return camera_ring(1, res)[0]


def test_sh_basis_dc_and_degree1():
    dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    out = sh_basis(dirs, 3)
    assert out.shape == (2, 16)
    assert np.allclose(out[:, 0], _C0)
    # Degree-1 terms are linear in the direction components.
    assert np.isclose(out[0, 2], 0.4886025119029199, atol=1e-12)
    assert np.isclose(out[1, 3], -0.4886025119029199, atol=1e-12)


def test_compute_colors_dc_only(rng):
    model = random_model(rng, 6, rest_amp=0.0)
    cam = _camera()
    colors, mask, basis = compute_colors(model, cam, dc_only=True)
    assert np.allclose(colors, np.clip(0.5 + _C0 * model.sh_dc, 0, 1),
                       atol=1e-12)
    assert np.all(mask == 1.0)
    assert basis.shape == (6, 1)


def test_compute_colors_saturation_mask():
    model = GaussianModel(
        positions=np.zeros((2, 3)), scales=np.full((2, 3), 0.1),
        rotations=np.array([[1.0, 0, 0, 0]] * 2),
        opacities=np.full(2, 0.5),
        sh_dc=np.array([[5.0, 0.0, -5.0], [0.1, 0.1, 0.1]]),
        sh_rest=np.zeros((2, 15, 3)), sh_degree=3)
    colors, mask, _ = compute_colors(model, _camera())
    assert colors[0, 0] == 1.0 and colors[0, 2] == 0.0
    assert mask[0, 0] == 0.0 and mask[0, 2] == 0.0
    assert np.all(mask[1] == 1.0)


def test_render_empty_model():
    out = render(GaussianModel.empty(), _camera())
    assert np.all(out.image == 0.0)
    assert out.weight_sum.shape == (0,)


def test_render_output_ranges(rng):
    model = random_model(rng, 20)
    out = render(model, _camera())
    assert out.image.min() >= 0.0
    assert out.image.max() <= 1.0 + 1e-12
    assert out.weight_sum.min() >= 0.0
    assert out.pixel_weight_sum.max() <= 1.0 + 1e-12
    assert np.array_equal(out.pixel_weight_sat,
                          np.minimum(1.0, out.pixel_weight_sum))


def test_render_thread_determinism(rng):
    model = random_model(rng, 40)
    cam = _camera(48)
    base = render(model, cam, threads=1)
    for t in (4, 8):
        out = render(model, cam, threads=t)
        assert np.array_equal(out.image, base.image)
        assert np.array_equal(out.weight_sum, base.weight_sum)
        assert np.array_equal(out.pixel_weight_sum, base.pixel_weight_sum)


def test_contribution_maps_color_linearity(rng):
    # The rendered image is exactly the contribution maps contracted
    # with the per-Gaussian view colors.
    model = random_model(rng, 15)
    cam = _camera()
    out = render(model, cam)
    maps = contribution_maps(model, cam, np.arange(len(model)))
    colors, _, _ = compute_colors(model, cam)
    recon = np.einsum("nhw,nc->hwc", maps, colors)
    assert np.abs(recon - out.image).max() < 1e-12
    assert np.abs(maps.sum(axis=0) - out.pixel_weight_sum).max() < 1e-12


def test_contribution_maps_subset(rng):
    model = random_model(rng, 10)
    cam = _camera()
    all_maps = contribution_maps(model, cam, np.arange(10))
    some = contribution_maps(model, cam, [3, 7])
    assert np.array_equal(some[0], all_maps[3])
    assert np.array_equal(some[1], all_maps[7])


def test_backward_shape_and_channel_errors(rng):
    model = random_model(rng, 4)
    cam = _camera()
    with pytest.raises(ContractViolation):
        render_backward(model, cam, np.zeros((8, 8, 3)))
    with pytest.raises(ContractViolation):
        render_backward(model, cam, np.zeros((32, 32, 3)),
                        channels=("dc", "bogus"))


def test_backward_channel_selection(rng):
    model = random_model(rng, 6)
    cam = _camera()
    g = rng.standard_normal((32, 32, 3))
    grads = render_backward(model, cam, g, channels=("dc",))
    assert np.any(grads.sh_dc != 0)
    for name in ("rest", "opa", "rot", "sca"):
        assert np.all(grads.group(name) == 0)


def test_backward_role_filter(rng):
    model = random_model(rng, 8)
    model.roles[:4] = Role.WM
    model.roles[4:] = Role.VIS
    cam = _camera()
    g = rng.standard_normal((32, 32, 3))
    grads = render_backward(model, cam, g, role_filter=(Role.WM,))
    for name in CHANNEL_GROUPS:
        arr = grads.group(name)
        assert np.all(arr[4:] == 0)
    assert np.any(grads.sh_dc[:4] != 0)


def test_gradientset_utilities(rng):
    model = random_model(rng, 3)
    gs = GradientSet.zeros(model)
    assert gs.global_norm() == 0.0
    gs.sh_dc[0, 0] = 3.0
    gs.opacity[1] = 4.0
    assert np.isclose(gs.global_norm(), 5.0)
    doubled = gs.scaled(2.0)
    assert doubled.sh_dc[0, 0] == 6.0
    gs.add(doubled)
    assert gs.sh_dc[0, 0] == 9.0
    assert gs.group("opa") is gs.opacity


def test_visibility_stats(rng):
    model = random_model(rng, 25)
    cams = camera_ring(4, 32)
    v, eta, v_bar = visibility_stats(model, cams)
    assert v.shape == (25,)
    assert v.min() >= 0.0 and np.isclose(v.max(), 1.0)
    assert 0.0 < eta <= 1.0
    assert np.isclose(v_bar, v.mean())
    with pytest.raises(ContractViolation):
        visibility_stats(model, [])


def test_visibility_stats_vacuous():
    model = GaussianModel(
        positions=np.full((3, 3), 50.0), scales=np.full((3, 3), 0.1),
        rotations=np.array([[1.0, 0, 0, 0]] * 3),
        opacities=np.full(3, 0.5), sh_dc=np.zeros((3, 3)),
        sh_rest=np.zeros((3, 15, 3)), sh_degree=3)
    with pytest.warns(UserWarning):
        v, eta, v_bar = visibility_stats(model, [_camera()])
    assert np.all(v == 0.0)
    assert v_bar == 0.0
