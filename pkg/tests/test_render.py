import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, composite_pixel, random_scene, relative_errors, splats_of
from splathuman import _backend
from splathuman.camera import CameraSpec, circle_cameras, orbit_camera
from splathuman.errors import InputError
from splathuman.gaussians import Gaussian, GaussianSet
from splathuman.render import (
    load_depth,
    project_gaussian,
    render,
    render_splats,
    render_views,
    save_render,
    to_uint8,
)

BACKENDS = ["python"] + (["cython"] if _backend.BACKEND == "cython" else [])


def iso(center, scale, opacity, color):
    return Gaussian(np.asarray(center, float), np.full(3, scale), np.array([1.0, 0, 0, 0]), opacity,
                    np.asarray(color, float))


def test_camera_invariants():
    with pytest.raises(InputError):
        CameraSpec(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 8, 8, 0.1)
    with pytest.raises(InputError):
        CameraSpec(np.eye(3), np.zeros(3), 0, 8, 0.1)
    with pytest.raises(InputError):
        CameraSpec(np.eye(3), np.zeros(3), 8, 8, 0.0)
    for cam in circle_cameras(8):
        np.testing.assert_allclose(cam.rotation.T @ cam.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(cam.position, 3.0 * -cam.view_dir, atol=1e-12)


def test_project_identity_camera():
    cam = orbit_camera(0.0, 256, pixel_scale=1.0 / 128)
    np.testing.assert_array_equal(cam.rotation, np.eye(3))
    mean, cov, depth = project_gaussian(iso([0, 0, 0], 0.1, 1.0, [1, 0, 0]), cam)
    np.testing.assert_allclose(mean, [128, 128])
    np.testing.assert_allclose(cov, np.diag([(0.1 * 128) ** 2 + 0.1] * 2), rtol=1e-12)
    assert depth == pytest.approx(3.0)
    mean2, _, _ = project_gaussian(iso([0.5, 0, 0], 0.1, 1.0, [1, 0, 0]), cam)
    np.testing.assert_allclose(mean2 - mean, [64, 0], atol=1e-9)


def test_project_cov_is_spd():
    rng = np.random.default_rng(0)
    cam = orbit_camera(37.0, 32)
    for row in random_scene(rng, 20):
        g = Gaussian(row[0:3], row[3:6] * 1e-3, row[6:10], row[10], row[11:14])
        _, cov, _ = project_gaussian(g, cam)
        np.testing.assert_allclose(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) >= 0.1 - 1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_set_renders_background(backend):
    out = render(GaussianSet.empty(), orbit_camera(0.0, 16), (0.2, 0.3, 0.4), backend=backend)
    assert torch.all(out.alpha == 0)
    assert torch.all(out.color == torch.tensor([0.2, 0.3, 0.4], dtype=out.color.dtype))


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_opaque_red_center(backend):
    cam = orbit_camera(0.0, 17)
    # pixel centres sit on integer coordinates; put the Gaussian on pixel (8, 8)
    x = (8 - cam.width / 2) * cam.pixel_scale
    y = -(8 - cam.height / 2) * cam.pixel_scale
    gs = GaussianSet.from_gaussians([iso([x, y, 0], 0.1, 1.0, [1, 0, 0])])
    out = render(gs, cam, (0.0, 0.0, 1.0), backend=backend)
    np.testing.assert_array_equal(out.color[8, 8].numpy(), [1.0, 0.0, 0.0])
    assert out.alpha[8, 8].item() == 1.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_overlapping_gaussians_match_hand_composite(backend):
    cam = orbit_camera(30.0, 24)
    gauss = [([0.05, 0.02, 0.1], [0.2, 0.1, 0.15], [0.9, 0.1, -0.3, 0.2], 0.7, [0.9, 0.2, 0.1]),
             ([-0.03, 0.0, -0.2], [0.25, 0.3, 0.1], [0.5, 0.5, 0.5, -0.5], 0.8, [0.1, 0.3, 0.9])]
    gs = GaussianSet.from_gaussians([Gaussian(np.array(c), np.array(s), np.array(q) / np.linalg.norm(q), o,
                                              np.array(col)) for c, s, q, o, col in gauss])
    bg = (0.3, 0.6, 0.2)
    out = render(gs, cam, bg, cutoff=0.0, backend=backend)
    params = gs.params.astype(np.float64)
    stored = [(p[0:3], p[3:6], p[6:10], p[10], p[11:14]) for p in params]
    for px, py in [(12, 12), (10, 13), (15, 9), (2, 20)]:
        color, alpha = composite_pixel(stored, cam, px, py, bg)
        np.testing.assert_allclose(out.color[py, px].numpy(), color, atol=1e-12)
        assert out.alpha[py, px].item() == pytest.approx(alpha, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_random_scenes_match_hand_composite(backend):
    rng = np.random.default_rng(11)
    cam = orbit_camera(-70.0, 12)
    for _ in range(5):
        p = random_scene(rng, int(rng.integers(1, 6)))
        out = render_splats(splats_of(p), cam, (0.1, 0.2, 0.3), cutoff=0.0, backend=backend)
        stored = [(r[0:3], r[3:6], r[6:10], r[10], r[11:14]) for r in p]
        for py in range(0, 12, 3):
            for px in range(0, 12, 4):
                color, alpha = composite_pixel(stored, cam, px, py, (0.1, 0.2, 0.3))
                np.testing.assert_allclose(out.color[py, px].numpy(), color, atol=1e-12)
                assert out.alpha[py, px].item() == pytest.approx(alpha, abs=1e-12)


def test_render_views_matches_render():
    gs = GaussianSet.from_gaussians([iso([0.2, 0, 0.3], 0.2, 0.9, [1, 0, 0]), iso([-0.2, 0, -0.3], 0.2, 0.9, [0, 1, 0])])
    cams = [orbit_camera(0.0, 16), orbit_camera(180.0, 16)]
    outs = render_views(gs, cams)
    for cam, out in zip(cams, outs):
        ref = render(gs, cam)
        assert torch.equal(out.color, ref.color) and torch.equal(out.alpha, ref.alpha)
    assert not torch.equal(outs[0].color, outs[1].color)
    same = render_views(gs, [cams[0]] * 3)
    assert all(torch.equal(o.color, same[0].color) for o in same)
    assert len(render_views(gs, [cams[0]])) == 1


def test_occlusion_by_opaque_front_gaussian():
    cam = orbit_camera(0.0, 16)
    front = iso([0, 0, 0.5], 0.3, 1.0 - 1e-9, [1, 0, 0])
    back = iso([0, 0, -0.5], 0.3, 1.0, [0, 1, 0])
    out = render(GaussianSet.from_gaussians([back, front]), cam, (0, 0, 1), cutoff=0.0)
    solo = render(GaussianSet.from_gaussians([front]), cam, (0, 0, 0), cutoff=0.0)
    core = solo.alpha > 1 - 1e-6
    assert core.any()
    diff = (out.color - solo.color)[core]
    assert diff.abs().max().item() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.98))
def test_alpha_monotone_in_opacity(seed, base):
    rng = np.random.default_rng(seed)
    p = random_scene(rng, int(rng.integers(1, 5)))
    cam = orbit_camera(float(rng.uniform(0, 360)), 12)
    k = int(rng.integers(len(p)))
    prev = None
    for o in np.linspace(base, 0.99, 4):
        q = p.copy()
        q[k, 10] = o
        alpha = render_splats(splats_of(q), cam, cutoff=0.0).alpha.numpy()
        if prev is not None:
            assert np.all(alpha >= prev - 1e-12)
        prev = alpha


@pytest.mark.parametrize("backend", BACKENDS)
def test_render_is_deterministic(backend):
    p = random_scene(np.random.default_rng(3), 5)
    cam = orbit_camera(12.0, 20)
    a = render_splats(splats_of(p), cam, backend=backend)
    b = render_splats(splats_of(p), cam, backend=backend)
    for x, y in zip(a, b):
        assert x.numpy().tobytes() == y.numpy().tobytes()


def test_alpha_zero_pixels_equal_background():
    gs = GaussianSet.from_gaussians([iso([0, 0, 0], 0.02, 0.8, [1, 0, 0])])
    out = render(gs, orbit_camera(0.0, 32), (0.25, 0.5, 0.75))
    zero = out.alpha == 0
    assert zero.any()
    assert torch.all(out.color[zero] == torch.tensor([0.25, 0.5, 0.75], dtype=out.color.dtype))
    assert torch.all((out.alpha >= 0) & (out.alpha <= 1))


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_agree_forward_and_backward():
    rng = np.random.default_rng(7)
    cam = orbit_camera(45.0, 24)
    for _ in range(3):
        p = random_scene(rng, 8)
        outs, grads = [], []
        for backend in BACKENDS:
            t = torch.tensor(p, requires_grad=True)
            out = render_splats(splats_of(t), cam, (0.2, 0.4, 0.6), backend=backend)
            (out.color.sum() + 2 * out.alpha.sum() + 0.5 * out.depth.sum()).backward()
            outs.append(out)
            grads.append(t.grad.numpy())
        for a, b in zip(*outs):
            np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), atol=1e-12)
        np.testing.assert_allclose(grads[0], grads[1], atol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradients_match_finite_differences(backend):
    rng = np.random.default_rng(5)
    cam = orbit_camera(30.0, 16)
    for _ in range(3):
        p = random_scene(rng, int(rng.integers(1, 4)))
        w = [torch.as_tensor(rng.normal(size=s)) for s in [(16, 16, 3), (16, 16), (16, 16)]]

        def loss(x):
            out = render_splats(splats_of(x), cam, (0.2, 0.3, 0.4), cutoff=0.0, backend=backend)
            return (out.color * w[0]).sum() + (out.alpha * w[1]).sum() + (out.depth * w[2]).sum()

        t = torch.tensor(p, requires_grad=True)
        loss(t).backward()
        numeric = central_difference(lambda x: loss(x).item(), p)
        err = relative_errors(t.grad.numpy(), numeric)
        assert err.size > 0 and err.max() < 1e-3


def test_png_quantization_and_depth_file(tmp_path):
    img = torch.tensor([[[0.0, 0.5, 1.0], [0.2, 1.7, -0.3]]])
    np.testing.assert_array_equal(to_uint8(img), [[[0, 128, 255], [51, 255, 0]]])
    gs = GaussianSet.from_gaussians([iso([0, 0, 0.2], 0.3, 0.9, [1, 0, 0])])
    out = render(gs, orbit_camera(0.0, 8))
    paths = save_render(out, tmp_path / "v")
    assert [p.name for p in paths] == ["v_color.png", "v_alpha.png", "v_depth.f32"]
    np.testing.assert_array_equal(load_depth(paths[2]), out.depth.numpy().astype(np.float32))
