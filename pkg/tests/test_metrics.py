import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from oracles import brute_chamfer, brute_f_score, brute_normal_consistency, random_rotation
from splathuman.camera import front_back_cameras
from splathuman.errors import InputError
from splathuman.mesh import TriMesh, box, icosphere
from splathuman.metrics import (
    CM_PER_UNIT,
    REPORT_HEADER,
    GeoReport,
    TexReport,
    chamfer,
    evaluate,
    f_score,
    image_metrics,
    normal_consistency,
    psnr,
    report_row,
    rigid_align,
    sample_surface,
    ssim,
    surface_chamfer,
    write_report,
)


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_chamfer_examples():
    p = np.random.default_rng(0).normal(size=(30, 3))
    assert chamfer(p, p) == (0.0, 0.0)
    assert chamfer([[0, 0, 0]], [[3, 4, 0]]) == (5.0, 5.0)
    with pytest.raises(InputError):
        chamfer(np.zeros((0, 3)), p)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, s = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        assert chamfer(p, s) == brute_chamfer(p, s)
        for tau in (0.3, 0.8, 1.5):
            assert f_score(p, s, tau) == brute_f_score(p, s, tau)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_chamfer_symmetric(n, m, seed):
    rng = np.random.default_rng(seed)
    p, s = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    a, b = chamfer(p, s)
    assert chamfer(s, p) == (b, a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    p, s = rng.normal(size=(40, 3)) * 5, rng.normal(size=(50, 3)) * 5
    pn, sn = unit(rng, 40), unit(rng, 50)
    r, t = random_rotation(rng), rng.normal(size=3) * 10
    move = lambda x: x @ r.T + t
    for a, b in zip(chamfer(p, s), chamfer(move(p), move(s))):
        assert abs(a - b) <= 1e-6
    assert abs(f_score(p, s, 2.0) - f_score(move(p), move(s), 2.0)) <= 1e-6
    nc0 = normal_consistency(p, pn, s, sn)
    nc1 = normal_consistency(move(p), pn @ r.T, move(s), sn @ r.T)
    assert abs(nc0 - nc1) <= 1e-6


def test_f_score_examples():
    p = np.random.default_rng(2).normal(size=(20, 3))
    assert f_score(p, p) == 100.0
    assert f_score([[0, 0, 0]], [[5, 0, 0]], tau=1.0) == 0.0
    assert f_score([[0, 0, 0], [10, 0, 0]], [[0, 0, 0]], tau=1.0) == pytest.approx(200.0 / 3.0)
    with pytest.raises(InputError):
        f_score(p, p, tau=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_f_score_monotone_in_tau(seed):
    rng = np.random.default_rng(seed)
    p, s = rng.normal(size=(30, 3)), rng.normal(size=(25, 3))
    values = [f_score(p, s, tau) for tau in np.linspace(0.05, 3.0, 12)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 100.0 for v in values)


def test_normal_consistency_examples():
    rng = np.random.default_rng(3)
    p, n = rng.normal(size=(40, 3)), unit(rng, 40)
    assert normal_consistency(p, n, p, n) == pytest.approx(1.0)
    assert normal_consistency(p, -n, p, n) == pytest.approx(-1.0)
    bad = n.copy()
    bad[3] = 0.0
    with pytest.raises(InputError):
        normal_consistency(p, bad, p, n)
    with pytest.raises(InputError):
        normal_consistency(p, 2 * n, p, n)


def test_normal_consistency_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(10):
        p, g = rng.normal(size=(35, 3)), rng.normal(size=(45, 3))
        pn, gn = unit(rng, 35), unit(rng, 45)
        assert normal_consistency(p, pn, g, gn) == pytest.approx(brute_normal_consistency(p, pn, g, gn), abs=1e-9)


def test_sample_surface_examples():
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    pts, normals = sample_surface(tri, 3, seed=0)
    assert np.all(pts[:, 2] == 0) and np.all(pts[:, :2] >= 0) and np.all(pts[:, :2].sum(1) <= 1 + 1e-12)
    np.testing.assert_allclose(normals, [[0, 0, 1]] * 3)
    a, _ = sample_surface(tri, 50, seed=9)
    b, _ = sample_surface(tri, 50, seed=9)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(InputError):
        sample_surface(tri, 0)


def test_sample_surface_area_weighting():
    # triangle areas 1 and 3
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
    mesh = TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    np.testing.assert_allclose(mesh.face_areas(), [1, 3])
    pts, _ = sample_surface(mesh, 100_000, seed=0)
    share = np.mean(pts[:, 0] >= 10)
    assert abs(share - 0.75) < 0.01


def test_surface_chamfer_matches_dense_oracle():
    rng = np.random.default_rng(5)
    mesh = icosphere(2, 0.5)
    pts = rng.normal(size=(300, 3)) * 0.4
    # dense oracle: closest point found by fine sampling of every triangle
    tri = mesh.vertices[mesh.faces]
    u, v = np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41))
    keep = u + v <= 1
    u, v = u[keep], v[keep]
    samples = (tri[:, None, 0] + u[None, :, None] * (tri[:, None, 1] - tri[:, None, 0])
               + v[None, :, None] * (tri[:, None, 2] - tri[:, None, 0])).reshape(-1, 3)
    dense = cKDTree(samples).query(pts)[0].mean()
    exact = surface_chamfer(pts, mesh)
    assert exact <= dense + 1e-12
    assert dense - exact < 2e-3


def test_surface_chamfer_exact_on_known_geometry():
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]))
    pts = np.array([[0.2, 0.2, 0.5], [2.0, 0.0, 0.0], [-1.0, -1.0, 0.0], [1.0, 1.0, 0.0]])
    expected = np.array([0.5, 1.0, math.sqrt(2), math.sqrt(0.5)])
    assert surface_chamfer(pts, tri) == pytest.approx(expected.mean(), abs=1e-12)


def test_psnr_and_ssim_examples():
    rng = np.random.default_rng(6)
    gt = rng.uniform(0.1, 0.8, (32, 32, 3))
    assert psnr(gt, gt) == 99.0
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)
    assert ssim(gt, gt) == pytest.approx(1.0)
    yy, xx = np.mgrid[:32, :32]
    board = ((xx // 4 + yy // 4) % 2).astype(float)[..., None].repeat(3, -1)
    assert ssim(board, 1.0 - board) < 0
    p, s, l = image_metrics(gt, gt)
    assert (p, s, l) == (99.0, pytest.approx(1.0), 0.0)
    with pytest.raises(InputError):
        image_metrics(gt, gt[:16])


def test_ssim_constant_images():
    # zero variance leaves only the luminance term (2ab + C1) / (a^2 + b^2 + C1)
    c1 = 0.01**2
    for a, b in ((0.2, 0.7), (0.5, 0.5), (0.0, 1.0)):
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((16, 16, 3), a), np.full((16, 16, 3), b)) == pytest.approx(expected, rel=1e-9)
    with pytest.raises(InputError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_evaluate_identity_and_translation():
    gt = icosphere(3, 0.5).with_colors(np.tile([0.8, 0.3, 0.2], (642, 1)))
    cams = front_back_cameras(64)
    geo, tex = evaluate(gt, gt, cams, n_points=5000)
    assert geo == GeoReport(0.0, 0.0, pytest.approx(1.0), 100.0)
    assert (tex.psnr_f, tex.psnr_b, tex.perc_f, tex.perc_b) == (99.0, 99.0, 0.0, 0.0)
    assert tex.ssim_f == pytest.approx(1.0) and tex.ssim_b == pytest.approx(1.0)
    # a square shifted along its normal: every nearest neighbour is the shifted partner
    sq = TriMesh(np.array([[-0.4, -0.4, 0], [0.4, -0.4, 0], [0.4, 0.4, 0], [-0.4, 0.4, 0]], float),
                 np.array([[0, 1, 2], [0, 2, 3]]))
    moved = sq.with_vertices(sq.vertices + [0, 0, 1.0 / CM_PER_UNIT])
    geo, _ = evaluate(moved, sq, cams, n_points=5000)
    assert geo.cd_p2s == pytest.approx(1.0, abs=1e-9) and geo.cd_s2p == pytest.approx(1.0, abs=1e-9)
    assert geo.nc == pytest.approx(1.0)


def test_evaluate_is_deterministic():
    gt = box((0.3, 0.5, 0.2))
    pred = icosphere(2, 0.4)
    cams = front_back_cameras(32)
    a = evaluate(pred, gt, cams, n_points=2000, seed=3)
    b = evaluate(pred, gt, cams, n_points=2000, seed=3)
    assert a == b


def test_report_csv():
    geo = GeoReport(1.0, 2.5, 0.75, 50.0)
    tex = TexReport(20.0, 21.0, 0.9, 0.8, 0.1, 0.2)
    text = write_report([report_row("case_a", geo, tex)])
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[0] == "case,cd_p2s,cd_s2p,nc,fscore,psnr_f,psnr_b,ssim_f,ssim_b,perc_f,perc_b"
    assert lines[1] == "case_a,1.000000,2.500000,0.750000,50.000000,20.000000,21.000000,0.900000,0.800000,0.100000,0.200000"
    assert geo.chamfer == 1.75


def test_rigid_align_recovers_known_motion():
    rng = np.random.default_rng(11)
    src = rng.uniform(-1, 1, (400, 3)) * [0.2, 0.9, 0.4]
    rot = Rotation.from_euler("xyz", [8, -5, 12], degrees=True).as_matrix()
    t = np.array([0.03, -0.05, 0.02])
    r_est, t_est = rigid_align(src, src @ rot.T + t)
    np.testing.assert_allclose(r_est, rot, atol=1e-9)
    np.testing.assert_allclose(t_est, t, atol=1e-9)


def test_evaluate_align_flag():
    gt = box((0.2, 0.5, 0.1))
    rot = Rotation.from_euler("y", 6, degrees=True).as_matrix()
    moved = gt.with_vertices(gt.vertices @ rot.T + [0.02, 0.01, 0.0])
    cams = front_back_cameras(32)
    raw, _ = evaluate(moved, gt, cams, 20_000, seed=0)
    aligned, _ = evaluate(moved, gt, cams, 20_000, seed=0, align=True)
    assert raw.chamfer > 1.0
    assert aligned.chamfer < 0.01 and aligned.nc > 0.999
