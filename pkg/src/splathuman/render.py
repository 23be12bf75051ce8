"""Differentiable splat rendering under orthographic cameras.

Projection to pixel space runs in torch autograd; the per-pixel compositing
runs in the kernel backend with a hand-written backward pass.
"""
from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image

from . import _backend
from .camera import CameraSpec
from .gaussians import GaussianSet, Splats, covariances

COV2D_EPS = 0.1  # px^2
CULL_THRESHOLD = 1e-4


class RenderOutput(NamedTuple):
    color: torch.Tensor  # (H, W, C)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), alpha-weighted camera depth


class Projected(NamedTuple):
    means2d: torch.Tensor
    cov2d: torch.Tensor  # (N, 2, 2)
    depths: torch.Tensor


def project_splats(splats: Splats, cam: CameraSpec) -> Projected:
    dtype = splats.centers.dtype
    mean2d, depth = cam.project(splats.centers)
    jac = torch.as_tensor(cam.jacobian(), dtype=dtype)
    cov3d = covariances(splats.scales, splats.rotations)
    cov2d = jac @ cov3d @ jac.T + COV2D_EPS * torch.eye(2, dtype=dtype)
    return Projected(mean2d, cov2d, depth)


def project_gaussian(g, cam: CameraSpec):
    """Project one Gaussian; returns (mean2d, cov2d, depth) as numpy values."""
    t = lambda v: torch.as_tensor(np.asarray(v, dtype=np.float64))[None]
    p = project_splats(Splats(t(g.center), t(g.scale), t(g.rotation), t(g.opacity), t(g.color)), cam)
    return p.means2d[0].numpy(), p.cov2d[0].numpy(), float(p.depths[0])


def _conics(cov2d: torch.Tensor) -> torch.Tensor:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=1)


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opacities, colors, depths, order, background,
                width, height, cutoff, core):
        as64 = lambda t: np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)
        args = (as64(means2d), as64(conics), as64(opacities), as64(colors), as64(depths))
        bg = np.ascontiguousarray(background, dtype=np.float64)
        color, trans, dep, rec_pix, rec_gid, rec_t = core.rasterize_forward(
            *args, np.ascontiguousarray(order, dtype=np.int64), bg, width, height, cutoff)
        ctx.core = core
        ctx.width = width
        ctx.kernel_args = args + (bg,)
        ctx.records = (rec_pix, rec_gid, rec_t)
        ctx.dtype = means2d.dtype
        out = lambda a: torch.from_numpy(a).to(means2d.dtype)
        return out(color), out(1.0 - trans), out(dep)

    @staticmethod
    def backward(ctx, g_color, g_alpha, g_depth):
        h, w, nc = g_color.shape
        as64 = lambda t: np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)
        grads = ctx.core.rasterize_backward(
            as64(g_color).reshape(h * w, nc), as64(g_alpha).reshape(-1), as64(g_depth).reshape(-1),
            *ctx.kernel_args, ctx.width, *ctx.records)
        g_mean, g_conic, g_opac, g_col, g_dep = (torch.from_numpy(g).to(ctx.dtype) for g in grads)
        return g_mean, g_conic, g_opac, g_col, g_dep, None, None, None, None, None, None


def render_splats(splats: Splats, cam: CameraSpec, background=(1.0, 1.0, 1.0),
                  cutoff: float = CULL_THRESHOLD, backend: str | None = None) -> RenderOutput:
    """Alpha-composite splats front to back; differentiable in every attribute."""
    core = _backend.get_core(backend)
    background = np.asarray(background, dtype=np.float64).reshape(-1)
    dtype = splats.centers.dtype
    if len(splats) == 0:
        h, w = cam.height, cam.width
        bg = torch.as_tensor(background, dtype=dtype)
        return RenderOutput(bg.expand(h, w, -1).clone(), torch.zeros(h, w, dtype=dtype),
                            torch.zeros(h, w, dtype=dtype))
    proj = project_splats(splats, cam)
    order = np.argsort(proj.depths.detach().cpu().numpy(), kind="stable")
    return RenderOutput(*_Composite.apply(
        proj.means2d, _conics(proj.cov2d), splats.opacities, splats.colors, proj.depths,
        order, background, cam.width, cam.height, cutoff, core))


def render(gset: GaussianSet, cam: CameraSpec, background=(1.0, 1.0, 1.0),
           cutoff: float = CULL_THRESHOLD, backend: str | None = None) -> RenderOutput:
    return render_splats(gset.to_splats(), cam, background, cutoff, backend)


def render_views(gset: GaussianSet, cams, background=(1.0, 1.0, 1.0),
                 cutoff: float = CULL_THRESHOLD) -> list[RenderOutput]:
    splats = gset.to_splats()
    return [render_splats(splats, cam, background, cutoff) for cam in cams]


def to_uint8(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, optimize=False)


def save_depth(depth, path) -> None:
    """Raw little-endian float32 with a (width, height) uint32 prefix."""
    arr = depth.detach().cpu().numpy() if isinstance(depth, torch.Tensor) else np.asarray(depth)
    h, w = arr.shape
    Path(path).write_bytes(np.array([w, h], "<u4").tobytes() + arr.astype("<f4").tobytes())


def load_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h = np.frombuffer(data[:8], "<u4")
    return np.frombuffer(data[8:], "<f4").reshape(h, w).copy()


def save_render(out: RenderOutput, prefix) -> list[Path]:
    prefix = str(prefix)
    paths = [Path(prefix + "_color.png"), Path(prefix + "_alpha.png"), Path(prefix + "_depth.f32")]
    save_png(out.color, paths[0])
    save_png(out.alpha, paths[1])
    save_depth(out.depth, paths[2])
    return paths
