"""Mesh extraction from normal Gaussians and render-based vertex refinement.

The coarse mesh is the iso-surface of the opacity-weighted Gaussian density.
Refinement moves vertices (faces never change) to match normal and mask
images rendered from the Gaussians, with a uniform Laplacian regularizer.
Every step is safeguarded: a step that raises the objective is halved and
retried, so the accepted objective never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from . import _backend
from .camera import CameraSpec, circle_cameras
from .errors import ExtractionError, InputError, NumericError
from .gaussians import GaussianSet, quat_to_rotmat
from .losses import NORMAL_BACKGROUND
from .mesh import TriMesh, largest_component, remove_degenerate, vertex_adjacency
from .render import render

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemeshConfig:
    resolution: int = 128
    iso: float = 0.3
    steps: int = 400
    step_size: float = 5e-3
    laplacian_weight: float = 0.1
    views: int = 8
    image_size: int = 256
    max_halvings: int = 10
    sharpness: float = 20.0  # 1/px, soft silhouette
    bounds: float = 1.0  # density grid spans [-bounds, bounds]^3

    def validate(self) -> None:
        if self.resolution < 8:
            raise InputError("grid resolution must be at least 8")
        if not self.iso > 0:
            raise InputError("iso level must be positive")
        if self.steps < 0:
            raise InputError("steps must be non-negative")
        if self.step_size < 0 or self.laplacian_weight < 0:
            raise InputError("step size and laplacian weight must be non-negative")


# ---------------------------------------------------------------- coarse mesh

def gaussian_density_grid(gset: GaussianSet, resolution: int, bounds: float = 1.0, floor: float = 1e-5):
    """Density sampled on a resolution^3 lattice over [-bounds, bounds]^3; returns (grid, origin, spacing)."""
    p = gset.params.astype(np.float64)
    rot = quat_to_rotmat(p[:, 6:10])
    inv = np.einsum("nij,nj,nkj->nik", rot, 1.0 / p[:, 3:6] ** 2, rot)
    inv6 = np.ascontiguousarray(inv[:, [0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]])
    opacity = np.ascontiguousarray(p[:, 10])
    # beyond this radius a Gaussian adds less than ``floor``
    radius = p[:, 3:6].max(axis=1) * np.sqrt(2.0 * np.log(np.maximum(opacity / floor, 1.0)))
    spacing = 2.0 * bounds / (resolution - 1)
    origin = np.full(3, -bounds)
    core = _backend.get_core()
    grid = core.density_grid(np.ascontiguousarray(p[:, 0:3]), inv6, np.ascontiguousarray(radius), opacity,
                             origin, spacing, int(resolution))
    return grid, origin, spacing


def init_coarse_mesh(g_n: GaussianSet, cfg: RemeshConfig | None = None) -> TriMesh:
    cfg = cfg or RemeshConfig()
    cfg.validate()
    if len(g_n) == 0:
        raise ExtractionError("cannot extract a surface from an empty Gaussian set")
    grid, origin, spacing = gaussian_density_grid(g_n, cfg.resolution, cfg.bounds)
    if not grid.max() > cfg.iso or not grid.min() < cfg.iso:
        raise ExtractionError(f"density never crosses the iso level {cfg.iso}")
    verts, faces, _, _ = marching_cubes(grid, level=cfg.iso, spacing=(spacing,) * 3)
    mesh = remove_degenerate(TriMesh(verts + origin, faces))
    if mesh.n_faces == 0:
        raise ExtractionError("iso-surface is empty")
    mesh = largest_component(mesh)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


# ---------------------------------------------------------------- differentiable rendering

@dataclass
class MeshTopology:
    """Edge/face incidence reused across refinement steps."""
    faces: np.ndarray
    edges: np.ndarray  # (E, 2) unique undirected
    edge_faces: np.ndarray  # (E, 2) adjacent faces, -1 for a boundary edge
    laplacian: torch.Tensor = field(repr=False)  # sparse row-normalized adjacency

    @classmethod
    def build(cls, mesh: TriMesh) -> "MeshTopology":
        f = mesh.faces
        half = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        owner = np.tile(np.arange(len(f)), 3)
        key = np.sort(half, axis=1)
        edges, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        first = np.ones(len(order), bool)
        first[1:] = inv[order][1:] != inv[order][:-1]
        edge_faces[inv[order][first], 0] = owner[order][first]
        second = ~first
        edge_faces[inv[order][second], 1] = owner[order][second]
        adj = vertex_adjacency(mesh.n_vertices, f).tocoo()
        deg = np.maximum(np.asarray(adj.sum(axis=1)).reshape(-1), 1.0)
        lap = torch.sparse_coo_tensor(np.vstack([adj.row, adj.col]), adj.data / deg[adj.row],
                                      (mesh.n_vertices, mesh.n_vertices), dtype=torch.float64,
                                      check_invariants=False).coalesce()
        return cls(f, edges, edge_faces, lap)


class MeshRender(tuple):
    """(normal image (H, W, 3), soft mask (H, W))."""

    __slots__ = ()

    def __new__(cls, normal, mask):
        return super().__new__(cls, (normal, mask))

    normal = property(lambda self: self[0])
    mask = property(lambda self: self[1])


def _vertex_normals_t(v: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    tri = v[faces]
    cross = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    n = torch.zeros_like(v).index_add_(0, faces.reshape(-1), cross.repeat_interleave(3, dim=0))
    return n / n.norm(dim=1, keepdim=True).clamp_min(1e-12)


def _band_pixels(hard: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbourhood crosses the hard silhouette boundary."""
    m = hard
    edge = np.zeros_like(m)
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    edge[:, :-1] |= m[:, 1:] != m[:, :-1]
    edge[1:] |= m[1:] != m[:-1]
    edge[:-1] |= m[1:] != m[:-1]
    return edge


def _segment_distance(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ab = b - a
    t = ((p - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp_min(1e-24)
    t = t.clamp(0.0, 1.0)
    return (p - a - t[..., None] * ab).norm(dim=-1)


def render_mesh(mesh, cam: CameraSpec, vertices: torch.Tensor | None = None,
                topology: MeshTopology | None = None, sharpness: float = 20.0, k_edges: int = 8) -> MeshRender:
    """Normal map ((n + 1) / 2 over grey) and soft silhouette, differentiable in ``vertices``.

    ``vertices`` defaults to the mesh's own positions (as a float64 tensor).
    """
    if mesh.is_empty():
        raise InputError("cannot render an empty mesh")
    topo = topology or MeshTopology.build(mesh)
    v = vertices if vertices is not None else torch.from_numpy(mesh.vertices.astype(np.float64))
    h, w = cam.height, cam.width
    xy_t, depth_t = cam.project(v)
    xy = xy_t.detach().numpy()
    core = _backend.get_core()
    face_id, _, _ = core.raster_mesh(np.ascontiguousarray(xy), np.ascontiguousarray(depth_t.detach().numpy()),
                                     topo.faces, w, h)
    face_id = face_id.reshape(h, w)
    covered = face_id >= 0
    pix = np.nonzero(covered.reshape(-1))[0]
    faces_t = torch.from_numpy(topo.faces)

    # normals: barycentrics of the pixel centre in the visible face, recomputed in torch
    normal = torch.full((h * w, 3), NORMAL_BACKGROUND[0], dtype=v.dtype)
    if len(pix):
        fsel = torch.from_numpy(face_id.reshape(-1)[pix])
        corners = faces_t[fsel]
        p = torch.from_numpy(np.stack([pix % w, pix // w], axis=1).astype(np.float64)).to(v.dtype)
        a, b, c = xy_t[corners[:, 0]], xy_t[corners[:, 1]], xy_t[corners[:, 2]]
        cross2 = lambda u, q: u[:, 0] * q[:, 1] - u[:, 1] * q[:, 0]
        area = cross2(b - a, c - a)
        wa = cross2(b - p, c - p) / area
        wb = cross2(c - p, a - p) / area
        wc = 1.0 - wa - wb
        vn = _vertex_normals_t(v, faces_t)
        n = wa[:, None] * vn[corners[:, 0]] + wb[:, None] * vn[corners[:, 1]] + wc[:, None] * vn[corners[:, 2]]
        n = n / n.norm(dim=1, keepdim=True).clamp_min(1e-12)
        normal = normal.index_put((torch.from_numpy(pix),), 0.5 * (n + 1.0))

    # silhouette: hard inside/outside, softened by the signed contour distance on the boundary band
    mask = torch.from_numpy(covered.reshape(-1).astype(np.float64)).to(v.dtype)
    band = np.nonzero(_band_pixels(covered).reshape(-1))[0]
    f_xy = xy[topo.faces]
    orient = np.sign((f_xy[:, 1, 0] - f_xy[:, 0, 0]) * (f_xy[:, 2, 1] - f_xy[:, 0, 1])
                     - (f_xy[:, 2, 0] - f_xy[:, 0, 0]) * (f_xy[:, 1, 1] - f_xy[:, 0, 1]))
    ef = topo.edge_faces
    o0 = orient[ef[:, 0]]
    o1 = np.where(ef[:, 1] >= 0, orient[np.maximum(ef[:, 1], 0)], -o0)
    contour = np.nonzero(o0 * o1 < 0)[0]
    if len(band) and len(contour):
        e = topo.edges[contour]
        mid = 0.5 * (xy[e[:, 0]] + xy[e[:, 1]])
        half_len = 0.5 * np.linalg.norm(xy[e[:, 0]] - xy[e[:, 1]], axis=1).max()
        bxy = np.stack([band % w, band // w], axis=1).astype(np.float64)
        k = min(k_edges, len(contour))
        _, nn_idx = cKDTree(mid).query(bxy, k=k)
        nn_idx = nn_idx.reshape(len(band), -1)
        rows = [np.repeat(np.arange(len(band)), k)]
        cols = [nn_idx.reshape(-1)]
        # midpoint ranking can miss a long edge; widen the search where it might
        wide = []
        if k < len(contour):
            d_mid = np.linalg.norm(mid[nn_idx[:, -1]] - bxy, axis=1)
            d_seg = _np_seg(bxy[:, None], xy[e[nn_idx, 0]], xy[e[nn_idx, 1]]).min(axis=1)
            wide = np.nonzero(d_mid < d_seg + half_len)[0]
        tree = cKDTree(mid) if len(wide) else None
        for i in wide:
            extra = np.asarray(tree.query_ball_point(bxy[i], d_seg[i] + half_len), dtype=np.int64)
            rows.append(np.full(len(extra), i))
            cols.append(extra)
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        pa = xy_t[torch.from_numpy(e[cols, 0])]
        pb = xy_t[torch.from_numpy(e[cols, 1])]
        d = _segment_distance(torch.from_numpy(bxy[rows]).to(v.dtype), pa, pb)
        dmin = torch.full((len(band),), float("inf"), dtype=v.dtype).scatter_reduce(
            0, torch.from_numpy(rows), d, reduce="amin", include_self=True)
        sign = torch.from_numpy(np.where(covered.reshape(-1)[band], 1.0, -1.0)).to(v.dtype)
        mask = mask.index_put((torch.from_numpy(band),), torch.sigmoid(sharpness * sign * dmin))
    return MeshRender(normal.reshape(h, w, 3), mask.reshape(h, w))


def _np_seg(p, a, b):
    ab = b - a
    t = np.clip(((p - a) * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-24), 0.0, 1.0)
    return np.linalg.norm(p - a - t[..., None] * ab, axis=-1)


# ---------------------------------------------------------------- refinement

@dataclass
class RefineResult:
    mesh: TriMesh
    losses: list  # objective at every accepted iterate, starting with the initial one
    halvings: int = 0
    stopped_early: bool = False


def render_targets(g_n: GaussianSet, cams):
    """(normal, mask) target pairs from the normal Gaussians."""
    out = []
    with torch.no_grad():
        for cam in cams:
            r = render(g_n, cam, NORMAL_BACKGROUND)
            out.append((r.color.to(torch.float64), r.alpha.to(torch.float64)))
    return out


def mesh_targets(mesh: TriMesh, cams, sharpness: float = 20.0):
    topo = MeshTopology.build(mesh)
    with torch.no_grad():
        return [tuple(render_mesh(mesh, cam, topology=topo, sharpness=sharpness)) for cam in cams]


def refine_objective(mesh, v, topo, cams, targets, cfg: RemeshConfig):
    data = v.new_zeros(())
    for cam, (tn, tm) in zip(cams, targets):
        r = render_mesh(mesh, cam, v, topo, cfg.sharpness)
        data = data + (r.normal - tn).square().mean() + (r.mask - tm).square().mean()
    data = data / max(len(cams), 1)
    if cfg.laplacian_weight > 0:
        resid = v - torch.sparse.mm(topo.laplacian, v)
        data = data + cfg.laplacian_weight * resid.square().sum()
    return data


def refine_mesh(mesh: TriMesh, g_n: GaussianSet | None = None, cams=None, cfg: RemeshConfig | None = None,
                targets=None) -> RefineResult:
    """Optimize vertex positions against normal/mask targets.

    Targets are rendered once from ``g_n`` unless given explicitly as a list
    of (normal, mask) pairs aligned with ``cams``.
    """
    cfg = cfg or RemeshConfig()
    cfg.validate()
    if mesh.is_empty():
        raise InputError("cannot refine an empty mesh")
    cams = cams if cams is not None else circle_cameras(cfg.views, cfg.image_size)
    if targets is None:
        if g_n is None:
            raise InputError("refinement needs normal Gaussians or explicit targets")
        targets = render_targets(g_n, cams)
    topo = MeshTopology.build(mesh)
    v = torch.from_numpy(mesh.vertices.astype(np.float64)).requires_grad_(True)
    loss = refine_objective(mesh, v, topo, cams, targets, cfg)
    if not torch.isfinite(loss):
        raise NumericError("step 0", "non-finite refinement objective")
    (grad,) = torch.autograd.grad(loss, v)
    result = RefineResult(mesh, [float(loss.detach())])
    m = torch.zeros_like(grad)
    s = torch.zeros_like(grad)
    b1, b2, eps = 0.9, 0.999, 1e-8
    cur = v.detach()
    lr = cfg.step_size  # halvings persist, so the step shrinks once progress stalls
    for step in range(1, cfg.steps + 1):
        m = b1 * m + (1 - b1) * grad
        s = b2 * s + (1 - b2) * grad * grad
        precond = (s / (1 - b2 ** step)).sqrt() + eps
        direction = (m / (1 - b1 ** step)) / precond
        if float((direction * grad).sum()) <= 0:
            direction = grad / precond  # momentum points uphill; use the plain scaled gradient
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            cand = (cur - lr * direction).requires_grad_(True)
            new_loss = refine_objective(mesh, cand, topo, cams, targets, cfg)
            if not torch.isfinite(new_loss):
                raise NumericError(f"step {step}", "non-finite refinement objective")
            if float(new_loss.detach()) <= result.losses[-1]:
                accepted = True
                break
            lr *= 0.5
            result.halvings += 1
        if not accepted:
            result.stopped_early = True
            log.info("refinement stopped at step %d: no descent after %d halvings", step, cfg.max_halvings)
            break
        (grad,) = torch.autograd.grad(new_loss, cand)
        cur = cand.detach()
        result.losses.append(float(new_loss.detach()))
    out = cur.numpy().copy()
    if not np.all(np.isfinite(out)):
        raise NumericError("refine", "non-finite vertices")
    result.mesh = mesh.with_vertices(out)
    return result


def remesh(g_n: GaussianSet, cfg: RemeshConfig | None = None, cams=None) -> RefineResult:
    """Coarse extraction followed by refinement."""
    cfg = cfg or RemeshConfig()
    coarse = init_coarse_mesh(g_n, cfg)
    if cfg.steps == 0:
        return RefineResult(coarse, [])
    return refine_mesh(coarse, g_n, cams, cfg)
