"""Geometry and image metrics.

World units are converted to centimetres with the 180 cm body height
(1.8 world units), so one world unit is 100 cm.
"""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from skimage.metrics import structural_similarity

from .errors import InputError
from .humanoid import HEIGHT_CM, HEIGHT_WORLD
from .losses import perceptual
from .mesh import TriMesh, render_color

CM_PER_UNIT = HEIGHT_CM / HEIGHT_WORLD
PSNR_CAP = 99.0
REPORT_HEADER = ("case", "cd_p2s", "cd_s2p", "nc", "fscore", "psnr_f", "psnr_b", "ssim_f", "ssim_b",
                 "perc_f", "perc_b")


@dataclass(frozen=True)
class GeoReport:
    cd_p2s: float
    cd_s2p: float
    nc: float
    fscore: float

    @property
    def chamfer(self) -> float:
        return 0.5 * (self.cd_p2s + self.cd_s2p)


@dataclass(frozen=True)
class TexReport:
    psnr_f: float
    psnr_b: float
    ssim_f: float
    ssim_b: float
    perc_f: float
    perc_b: float


def sample_surface(mesh: TriMesh, n: int, seed: int = 0):
    """Area-weighted uniform samples; returns (points (n, 3), face normals (n, 3))."""
    if n < 1:
        raise InputError("sample count must be at least 1")
    if mesh.is_empty():
        raise InputError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    if areas.sum() <= 0:
        raise InputError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u, v = np.where(flip, 1.0 - u, u), np.where(flip, 1.0 - v, v)
    tri = mesh.vertices[mesh.faces[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, mesh.face_normals()[face]


def _cloud(p, name: str) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise InputError(f"{name} point cloud is empty")
    return a


def nearest(src: np.ndarray, dst: np.ndarray):
    """Exact nearest neighbour of every ``src`` point in ``dst``: (distance, index)."""
    return cKDTree(dst).query(src, k=1)


def chamfer(p, s):
    """(mean distance P -> S, mean distance S -> P), in the units of the inputs."""
    p, s = _cloud(p, "P"), _cloud(s, "S")
    return float(nearest(p, s)[0].mean()), float(nearest(s, p)[0].mean())


def _unit_normals(n, name: str) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(n, axis=1)
    if np.any(norm < 1e-12):
        raise InputError(f"{name} contains a zero-length normal")
    if np.any(np.abs(norm - 1.0) > 1e-3):
        raise InputError(f"{name} normals must be unit length")
    return n


def normal_consistency(pred_pts, pred_normals, gt_pts, gt_normals) -> float:
    """Symmetric mean cosine between each normal and the normal of its nearest neighbour."""
    p, g = _cloud(pred_pts, "pred"), _cloud(gt_pts, "gt")
    pn, gn = _unit_normals(pred_normals, "pred"), _unit_normals(gt_normals, "gt")
    _, i_pg = nearest(p, g)
    _, i_gp = nearest(g, p)
    a = np.einsum("ij,ij->i", pn, gn[i_pg]).mean()
    b = np.einsum("ij,ij->i", gn, pn[i_gp]).mean()
    return float(np.clip(0.5 * (a + b), -1.0, 1.0))


def f_score(p, s, tau: float = 1.0) -> float:
    """Harmonic mean of precision and recall at threshold ``tau``, in percent."""
    if not tau > 0:
        raise InputError("tau must be positive")
    p, s = _cloud(p, "P"), _cloud(s, "S")
    precision = float(np.mean(nearest(p, s)[0] <= tau))
    recall = float(np.mean(nearest(s, p)[0] <= tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def surface_chamfer(p, mesh: TriMesh, chunk: int = 4096) -> float:
    """Mean exact distance from points to the triangle surface of ``mesh``.

    Candidate faces come from the nearest vertices; the closest point on each
    candidate triangle is evaluated exactly.
    """
    p = _cloud(p, "P")
    tri = mesh.vertices[mesh.faces]
    centroids = tri.mean(axis=1)
    reach = np.linalg.norm(tri - centroids[:, None], axis=2).max()
    tree = cKDTree(centroids)
    out = np.empty(len(p))
    k = min(16, len(centroids))
    for start in range(0, len(p), chunk):
        q = p[start:start + chunk]
        d0, idx = tree.query(q, k=k)
        idx = idx.reshape(len(q), -1)
        best = _point_triangle_distance(q[:, None], tri[idx]).min(axis=1)
        # a face whose centroid is beyond best + reach cannot be closer
        need = np.nonzero(np.atleast_2d(d0)[:, -1] < best + reach)[0] if k < len(centroids) else []
        for j in need:
            cand = tree.query_ball_point(q[j], best[j] + reach)
            best[j] = _point_triangle_distance(q[j][None], tri[cand]).min()
        out[start:start + chunk] = best
    return float(out.mean())


def _point_triangle_distance(p, tri) -> np.ndarray:
    """Exact distance from points ``p`` (..., 3) to triangles ``tri`` (..., 3, 3)."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab, ac, ap = b - a, c - a, p - a
    dot = lambda x, y: np.sum(x * y, axis=-1)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    safe = lambda x: np.where(np.abs(x) > 1e-300, x, 1.0)
    v = vb / safe(denom)
    w = vc / safe(denom)
    closest = a + v[..., None] * ab + w[..., None] * ac  # interior
    # edge and vertex regions, applied from least to most specific
    t_bc = (d4 - d3) / safe((d4 - d3) + (d5 - d6))
    closest = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[..., None], b + t_bc[..., None] * (c - b), closest)
    t_ac = d2 / safe(d2 - d6)
    closest = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[..., None], a + t_ac[..., None] * ac, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    t_ab = d1 / safe(d1 - d3)
    closest = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[..., None], a + t_ab[..., None] * ab, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(pred, gt, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.shape != y.shape:
        raise InputError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < 11:
        raise InputError("ssim needs images of at least 11x11 pixels")
    return float(structural_similarity(x, y, channel_axis=2 if x.ndim == 3 else None, data_range=data_range,
                                      gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=k1, K2=k2))


def image_metrics(pred, gt):
    """(psnr dB, ssim, perceptual distance) for (H, W, 3) images in [0, 1]."""
    p, g = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if p.shape != g.shape:
        raise InputError(f"image shapes differ: {p.shape} vs {g.shape}")
    with torch.no_grad():
        perc = float(perceptual(torch.from_numpy(p), torch.from_numpy(g)))
    return psnr(p, g), ssim(p, g), perc


def rigid_align(src, dst, iterations: int = 50, tol: float = 1e-10):
    """Point-to-point ICP; returns (R, t) with ``src @ R.T + t`` close to ``dst``."""
    src, dst = _cloud(src, "source"), _cloud(dst, "target")
    tree = cKDTree(dst)
    rot, t = np.eye(3), dst.mean(axis=0) - src.mean(axis=0)
    prev = np.inf
    for _ in range(iterations):
        moved = src @ rot.T + t
        dist, idx = tree.query(moved)
        err = float(np.mean(dist * dist))
        if prev - err <= tol:
            break
        prev = err
        matched = dst[idx]
        mu_s, mu_d = src.mean(axis=0), matched.mean(axis=0)
        r, _ = Rotation.align_vectors(matched - mu_d, src - mu_s)
        rot = r.as_matrix()
        t = mu_d - mu_s @ rot.T
    return rot, t


def evaluate(pred_mesh: TriMesh, gt_mesh: TriMesh, cams_front_back, n_points: int = 100_000,
             tau_cm: float = 1.0, seed: int = 0, pred_images=None, align: bool = False):
    """Geometry metrics in cm and front/back texture metrics.

    ``pred_images`` optionally supplies the (front, back) predicted renders,
    for example from texture Gaussians; otherwise the predicted mesh is
    rendered with its vertex colours. ``align`` rigidly registers the
    prediction to the ground truth first, for meshes from another frame.
    """
    if align:
        rot, t = rigid_align(sample_surface(pred_mesh, n_points, seed)[0], sample_surface(gt_mesh, n_points, seed)[0])
        pred_mesh = pred_mesh.with_vertices(pred_mesh.vertices @ rot.T + t)
    pp, pn = sample_surface(pred_mesh, n_points, seed)
    # one seed for both surfaces: identical meshes then yield identical samples
    gp, gn = sample_surface(gt_mesh, n_points, seed)
    pp, gp = pp * CM_PER_UNIT, gp * CM_PER_UNIT
    p2s, s2p = chamfer(pp, gp)
    geo = GeoReport(p2s, s2p, normal_consistency(pp, pn, gp, gn), f_score(pp, gp, tau_cm))
    tex = []
    for i, cam in enumerate(cams_front_back):
        gt_img, _ = render_color(gt_mesh, cam)
        pred_img = pred_images[i] if pred_images is not None else render_color(pred_mesh, cam)[0]
        tex.append(image_metrics(pred_img, gt_img))
    (pf, sf, lf), (pb, sb, lb) = tex
    return geo, TexReport(pf, pb, sf, sb, lf, lb)


def report_row(case: str, geo: GeoReport, tex: TexReport) -> list:
    return [case, *astuple(geo), *astuple(tex)]


def write_report(rows, path=None) -> str:
    """CSV with the fixed header; floats written with 6 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for row in rows:
        w.writerow([row[0], *(f"{float(v):.6f}" for v in row[1:])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


GEO_FIELDS = tuple(f.name for f in fields(GeoReport))
TEX_FIELDS = tuple(f.name for f in fields(TexReport))
