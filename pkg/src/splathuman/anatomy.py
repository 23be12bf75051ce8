"""Anatomy-aware shape features.

Each body part present in the label mask is cropped to a square, resized,
and split into patch tokens tagged with a part-identity embedding. Head
tokens, pooled to a fixed number of queries, attend to the tokens of the
whole body through stacked interaction blocks (self-attention, then
cross-attention over the body tokens, then an MLP).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .humanoid import PARTS

N_PARTS = len(PARTS)
HEAD_ID = 1


@dataclass(frozen=True)
class AnatomyConfig:
    crop_size: int = 224
    patch_size: int = 16
    width: int = 256
    n_query: int = 16
    n_blocks: int = 2
    heads: int = 8
    mlp_ratio: int = 4
    background: float = 1.0

    def validate(self) -> None:
        if self.crop_size % self.patch_size:
            raise ConfigError(f"crop_size {self.crop_size} is not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        side = math.isqrt(self.n_query)
        if side * side != self.n_query:
            raise ConfigError("n_query must be a perfect square")

    @property
    def grid(self) -> int:
        return self.crop_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2


@dataclass
class PartCropSet:
    crops: list  # [(part_id, tensor (3, S, S))] for present parts, in part-id order
    present: list  # bool per part id 1..8
    boxes: dict  # part_id -> (x0, y0, side) of the square region in image pixels

    def crop(self, part_id: int) -> torch.Tensor:
        for pid, c in self.crops:
            if pid == part_id:
                return c
        raise KeyError(part_id)


def part_square(mask: np.ndarray):
    """Square region (x0, y0, side) around a boolean part mask, or None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    side = max(x1 - x0, y1 - y0)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return int(math.floor(cx - side / 2)), int(math.floor(cy - side / 2)), side


def crop_parts(image, label_mask, crop_size: int = 224, background: float = 1.0) -> PartCropSet:
    """Square per-part crops of an (H, W, 3) image, resized to ``crop_size``.

    Regions reaching past the image border are padded with ``background``.
    Cropping is differentiable with respect to the image.
    """
    img = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image, dtype=np.float32))
    labels = label_mask.detach().cpu().numpy() if isinstance(label_mask, torch.Tensor) else np.asarray(label_mask)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"image must be HxWx3, got {tuple(img.shape)}")
    if labels.shape != tuple(img.shape[:2]):
        raise InputError(f"label mask {labels.shape} does not match image {tuple(img.shape[:2])}")
    if labels.size and (labels.min() < 0 or labels.max() > N_PARTS):
        raise InputError("label mask values must lie in 0..8")
    h, w = labels.shape
    chw = img.permute(2, 0, 1)
    crops, present, boxes = [], [], {}
    for pid in range(1, N_PARTS + 1):
        sq = part_square(labels == pid)
        present.append(sq is not None)
        if sq is None:
            continue
        x0, y0, side = sq
        boxes[pid] = sq
        pad = (max(0, -x0), max(0, x0 + side - w), max(0, -y0), max(0, y0 + side - h))
        region = chw[:, max(0, y0):min(h, y0 + side), max(0, x0):min(w, x0 + side)]
        if any(pad):
            region = F.pad(region, pad, value=background)
        if side != crop_size:
            region = F.interpolate(region[None], size=(crop_size, crop_size), mode="bilinear",
                                   align_corners=False, antialias=side > crop_size)[0]
        crops.append((pid, region))
    return PartCropSet(crops, present, boxes)


class PatchEmbed(nn.Module):
    """Non-overlapping patches -> linear projection + 2D position + part identity."""

    def __init__(self, cfg: AnatomyConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.proj = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.n_patches, cfg.width))
        self.part = nn.Parameter(0.02 * torch.randn(N_PARTS, cfg.width))

    def forward(self, crop: torch.Tensor, part_id: int) -> torch.Tensor:
        side = crop.shape[-1]
        if crop.shape[-2] != side or side % self.cfg.patch_size:
            raise ConfigError(f"crop side {side} must be square and divisible by {self.cfg.patch_size}")
        tokens = self.proj(crop[None]).flatten(2).transpose(1, 2)[0]
        return tokens + self.pos + self.part[part_id - 1]


def patchify(crop: torch.Tensor, part_id: int, embed: PatchEmbed) -> torch.Tensor:
    return embed(crop, part_id)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, kv_width: int | None = None):
        super().__init__()
        kv_width = kv_width or width
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(kv_width, width)
        self.v = nn.Linear(kv_width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        m = ctx.shape[-2]
        hd = d // self.heads
        q = self.q(x).reshape(*lead, n, self.heads, hd).transpose(-2, -3)
        k = self.k(ctx).reshape(*lead, m, self.heads, hd).transpose(-2, -3)
        v = self.v(ctx).reshape(*lead, m, self.heads, hd).transpose(-2, -3)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(-2, -3).reshape(*lead, n, d)
        return self.out(y)


class InteractionBlock(nn.Module):
    """Pre-norm self-attention, cross-attention over body tokens, MLP; all residual."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_self = nn.LayerNorm(width)
        self.self_attn = Attention(width, heads)
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.cross_attn = Attention(width, heads)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(),
                                 nn.Linear(mlp_ratio * width, width))

    def forward(self, query: torch.Tensor, body: torch.Tensor) -> torch.Tensor:
        if query.shape[-1] != body.shape[-1]:
            raise InputError(f"query width {query.shape[-1]} != body token width {body.shape[-1]}")
        if body.shape[-2] < 1:
            raise InputError("at least one body token is required")
        h = self.norm_self(query)
        q = query + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm_q(q), self.norm_kv(body))
        return q + self.mlp(self.norm_mlp(q))


def interaction_block(query, body_tokens, block: InteractionBlock):
    return block(query, body_tokens)


class AnatomyShaping(nn.Module):
    """Image + part-label mask -> shape feature tokens (n_query x width)."""

    def __init__(self, cfg: AnatomyConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or AnatomyConfig()
        cfg.validate()
        self.embed = PatchEmbed(cfg)
        self.null_token = nn.Parameter(0.02 * torch.randn(cfg.width))
        self.blocks = nn.ModuleList(InteractionBlock(cfg.width, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.n_blocks))
        self.out = nn.Sequential(nn.LayerNorm(cfg.width), nn.Linear(cfg.width, cfg.width), nn.GELU(),
                                 nn.Linear(cfg.width, cfg.width))

    def pool_queries(self, head_tokens: torch.Tensor) -> torch.Tensor:
        g = self.cfg.grid
        q = int(math.isqrt(self.cfg.n_query))
        grid = head_tokens.T.reshape(1, self.cfg.width, g, g)
        return F.adaptive_avg_pool2d(grid, q).reshape(self.cfg.width, -1).T

    def tokens(self, crops: PartCropSet):
        """Query initialization and body tokens (absent parts contribute one null token each)."""
        per_part = {pid: self.embed(c, pid) for pid, c in crops.crops}
        body = []
        for pid in range(1, N_PARTS + 1):
            body.append(per_part[pid] if pid in per_part else self.null_token[None])
        if HEAD_ID in per_part:
            query = self.pool_queries(per_part[HEAD_ID])
        else:
            query = self.null_token[None].expand(self.cfg.n_query, -1)
        return query, torch.cat(body, dim=0)

    def forward(self, image, label_mask) -> torch.Tensor:
        crops = crop_parts(image, label_mask, self.cfg.crop_size, self.cfg.background)
        query, body = self.tokens(crops)
        for block in self.blocks:
            query = block(query, body)
        return self.out(query)


def extract_shape_features(image, label_mask, model: AnatomyShaping) -> torch.Tensor:
    return model(image, label_mask)
