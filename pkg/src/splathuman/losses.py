"""Image-space supervision: ground-truth view rendering and the 2D loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import CameraSpec
from .errors import InputError
from .mesh import render_color, render_normal
from .render import RenderOutput

NORMAL_BACKGROUND = (0.5, 0.5, 0.5)
TEXTURE_BACKGROUND = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 1.0
    w_mask: float = 1.0
    w_perc: float = 0.5

    def __post_init__(self):
        if min(self.w_mse, self.w_mask, self.w_perc) < 0:
            raise InputError("loss weights must be non-negative")


class SupervisionView(NamedTuple):
    camera: CameraSpec
    color: torch.Tensor  # (H, W, 3)
    mask: torch.Tensor  # (H, W)
    normal: torch.Tensor  # (H, W, 3), (n + 1) / 2 over grey


def render_supervision(scan, cams, supersample: int = 2) -> list[SupervisionView]:
    """Render the ground-truth mesh of ``scan`` (or a bare TriMesh) for every camera."""
    mesh = getattr(scan, "mesh", scan)
    if mesh.is_empty():
        raise InputError("cannot supervise with an empty mesh")
    views = []
    for cam in cams:
        color, cov = render_color(mesh, cam, TEXTURE_BACKGROUND, supersample)
        normal, _ = render_normal(mesh, cam, supersample)
        t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
        views.append(SupervisionView(cam, t(color), t(cov), t(normal)))
    return views


class PerceptualProxy(nn.Module):
    """Frozen, seeded three-stage random conv features compared LPIPS-style.

    Each stage's features are unit-normalized over channels; the distance
    is the spatial mean of the squared difference, summed over stages.
    """

    def __init__(self, seed: int = 0, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        cin = 3
        self.convs = nn.ModuleList()
        for i, c in enumerate(channels):
            conv = nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * cin)) ** 0.5)
                conv.bias.copy_(0.1 * torch.randn(c, generator=gen))
            conv.requires_grad_(False)
            self.convs.append(conv)
            cin = c

    def features(self, img: torch.Tensor):
        x = img.permute(0, 3, 1, 2) * 2.0 - 1.0
        out = []
        for conv in self.convs:
            x = F.relu(F.conv2d(x, conv.weight.to(x.dtype), conv.bias.to(x.dtype), conv.stride, conv.padding))
            out.append(x / torch.sqrt((x * x).sum(dim=1, keepdim=True) + 1e-10))
        return out

    def forward(self, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) or (B, H, W, 3) images -> mean distance."""
        if pred.ndim == 3:
            pred, gt = pred[None], gt[None]
        total = pred.new_zeros(())
        for fp, fg in zip(self.features(pred), self.features(gt)):
            total = total + (fp - fg).square().sum(dim=1).mean()
        return total


_PROXY: dict[int, PerceptualProxy] = {}


def perceptual(pred: torch.Tensor, gt: torch.Tensor, seed: int = 0) -> torch.Tensor:
    if seed not in _PROXY:
        _PROXY[seed] = PerceptualProxy(seed)
    return _PROXY[seed](pred, gt)


def loss_2d(pred: RenderOutput, gt_color, gt_mask, weights: LossWeights = LossWeights()):
    """Weighted MSE + mask + perceptual loss; returns (total, {"mse", "mask", "perc"})."""
    gt_color = torch.as_tensor(gt_color, dtype=pred.color.dtype)
    gt_mask = torch.as_tensor(gt_mask, dtype=pred.alpha.dtype)
    if pred.color.shape != gt_color.shape or pred.alpha.shape != gt_mask.shape:
        raise InputError(f"prediction {tuple(pred.color.shape)} and target {tuple(gt_color.shape)} differ")
    terms = {
        "mse": (pred.color - gt_color).square().mean(),
        "mask": (pred.alpha - gt_mask).square().mean(),
        "perc": perceptual(pred.color, gt_color),
    }
    total = weights.w_mse * terms["mse"] + weights.w_mask * terms["mask"] + weights.w_perc * terms["perc"]
    return total, terms
