"""Twin texture/normal U-Nets with cross-network residual fusion.

Both networks share the image encoder output ``F_c`` and the shape tokens
``F_g``. From the middle block on, the two decoders exchange features: the
sum ``F_f = F_c + F_n`` replaces the input of the next up block in both
networks, and the last fused map feeds both output heads.

Each output pixel carries one Gaussian. Pixels alternate between a
front-surface and a back-surface head in a checkerboard, and the raw maps
start from a fixed per-pixel bias that places every Gaussian on its pixel
ray at roughly one pixel footprint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .anatomy import AnatomyConfig, AnatomyShaping
from .camera import SCENE_EXTENT
from .errors import ConfigError, InputError, NumericError
from .gaussians import CENTER_BOUND, MIN_SCALE, GaussianSet, Kind, activate, activate_raw_params

N_STAGES = 5
RAW_DIM = 14


@dataclass(frozen=True)
class TwinsConfig:
    resolution: int = 128
    widths: tuple = (64, 128, 256, 512, 512)
    base_width: int = 64
    shape_width: int = 256
    attn_stages: tuple = (4, 5)  # down stages (1-based) that cross-attend to F_g; 5 is H/32
    attn_heads: int = 4
    groups: int = 8
    fusion: bool = True
    head_init_scale: float = 0.05
    surface_offset: float = 0.05  # initial |z| of front/back Gaussians
    init_opacity: float = 0.1

    def validate(self) -> None:
        if self.resolution % (2 ** N_STAGES):
            raise ConfigError(f"resolution {self.resolution} must be divisible by {2 ** N_STAGES}")
        if len(self.widths) != N_STAGES:
            raise ConfigError(f"widths needs {N_STAGES} entries")
        for w in (self.base_width, *self.widths):
            if w % self.groups:
                raise ConfigError(f"width {w} is not divisible by groups {self.groups}")
        for s in self.attn_stages:
            if not 1 <= s <= N_STAGES:
                raise ConfigError(f"attention stage {s} outside 1..{N_STAGES}")


class TwinsActivations:
    """Named intermediate maps of one twins forward pass (all with a leading batch axis)."""

    def __init__(self):
        self.maps: dict[str, torch.Tensor] = {}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.maps[name]

    def __contains__(self, name: str) -> bool:
        return name in self.maps

    def __getattr__(self, name: str) -> torch.Tensor:
        maps = self.__dict__.get("maps", {})
        if name in maps:
            return maps[name]
        raise AttributeError(name)

    def names(self) -> list[str]:
        return list(self.maps)


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.n1 = _norm(cin, groups)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n2 = _norm(cout, groups)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.c1(F.silu(self.n1(x)))
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class TokenCrossAttention(nn.Module):
    """Feature-map positions attend to shape tokens; residual."""

    def __init__(self, ch: int, ctx_width: int, heads: int, groups: int):
        super().__init__()
        self.norm = _norm(ch, groups)
        self.ctx_norm = nn.LayerNorm(ctx_width)
        self.heads = heads
        self.q = nn.Linear(ch, ch)
        self.kv = nn.Linear(ctx_width, 2 * ch)
        self.out = nn.Linear(ch, ch)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.kv(self.ctx_norm(tokens)).chunk(2, dim=-1)
        hd = c // self.heads
        split = lambda t: t.reshape(b, -1, self.heads, hd).transpose(1, 2)
        att = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ split(v)).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(y).transpose(1, 2).reshape(b, c, h, w)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: TwinsConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        self.net = nn.Sequential(nn.Conv2d(3, b, 3, padding=1), _norm(b, cfg.groups), nn.SiLU(),
                                 nn.Conv2d(b, b, 3, padding=1))

    def forward(self, image):
        """(B, 3, H, W) in [0, 1] -> (B, base_width, H, W)."""
        r = self.cfg.resolution
        if image.shape[-2:] != (r, r):
            raise ConfigError(f"image resolution {tuple(image.shape[-2:])} does not match configured {r}x{r}")
        return self.net(2.0 * image - 1.0)


class UNet(nn.Module):
    """One of the twins. Down path, middle block, five up blocks and a 28-channel head."""

    def __init__(self, cfg: TwinsConfig):
        super().__init__()
        b, ws, g = cfg.base_width, cfg.widths, cfg.groups
        self.cfg = cfg
        self.shape_proj = nn.Linear(cfg.shape_width, b)
        self.in_conv = nn.Conv2d(2 * b, b, 3, padding=1)
        chans = (b, *ws)
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        for s in range(1, N_STAGES + 1):
            self.down.append(nn.ModuleList([nn.Conv2d(chans[s - 1], chans[s], 3, stride=2, padding=1),
                                            ResBlock(chans[s], chans[s], g)]))
            if s in cfg.attn_stages:
                self.down_attn[str(s)] = TokenCrossAttention(chans[s], cfg.shape_width, cfg.attn_heads, g)
        top = ws[-1]
        self.mid = nn.ModuleList([ResBlock(top, top, g),
                                  TokenCrossAttention(top, cfg.shape_width, cfg.attn_heads, g),
                                  ResBlock(top, top, g)])
        # up block k consumes the map at chans[N-k+1] and the skip at chans[N-k]
        self.up = nn.ModuleList()
        for k in range(1, N_STAGES + 1):
            cin, cskip = chans[N_STAGES - k + 1], chans[N_STAGES - k]
            self.up.append(ResBlock(cin + cskip, cskip, g))
        self.head_norm = _norm(b, g)
        self.head = nn.Conv2d(b, 2 * RAW_DIM, 1)
        with torch.no_grad():
            self.head.weight.mul_(cfg.head_init_scale)
            self.head.bias.zero_()

    def down_path(self, f_c, f_g):
        pooled = self.shape_proj(f_g.mean(dim=1))[:, :, None, None].expand_as(f_c)
        x = self.in_conv(torch.cat([f_c, pooled], dim=1))
        skips = [x]
        for s, (pool, block) in enumerate(self.down, start=1):
            x = block(pool(x))
            if str(s) in self.down_attn:
                x = self.down_attn[str(s)](x, f_g)
            skips.append(x)
        x = self.mid[0](skips.pop())
        x = self.mid[2](self.mid[1](x, f_g))
        return x, skips

    def up_block(self, k: int, x, skips):
        skip = skips[N_STAGES - k]
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.up[k - 1](torch.cat([x, skip], dim=1))

    def output(self, x):
        return self.head(F.silu(self.head_norm(x)))


def raw_bias_map(resolution: int, surface_offset: float = 0.05, init_opacity: float = 0.1,
                 scene_extent: float = SCENE_EXTENT) -> torch.Tensor:
    """(2, 14, H, W) fixed bias for the front and back heads: centres on the pixel grid."""
    r = resolution
    ps = scene_extent / r
    idx = torch.arange(r, dtype=torch.float64)
    xs = (idx - r / 2) * ps
    ys = (r / 2 - idx) * ps
    lim = CENTER_BOUND * (1 - 1e-3)
    atanh = lambda v: torch.atanh(torch.clamp(v / CENTER_BOUND, -lim / CENTER_BOUND, lim / CENTER_BOUND))
    bias = torch.zeros(2, RAW_DIM, r, r, dtype=torch.float64)
    for side, z in ((0, surface_offset), (1, -surface_offset)):
        bias[side, 0] = atanh(xs)[None, :].expand(r, r)
        bias[side, 1] = atanh(ys)[:, None].expand(r, r)
        bias[side, 2] = atanh(torch.tensor(z, dtype=torch.float64))
        bias[side, 3:6] = math.log(math.expm1(0.5 * ps - MIN_SCALE))
        bias[side, 6] = 1.0
        bias[side, 10] = math.log(init_opacity / (1 - init_opacity))
    return bias.float()


def checker_parity(resolution: int) -> torch.Tensor:
    i = torch.arange(resolution)
    return ((i[:, None] + i[None, :]) % 2).bool()


class TwinsUNet(nn.Module):
    def __init__(self, cfg: TwinsConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TwinsConfig()
        cfg.validate()
        self.encoder = ImageEncoder(cfg)
        self.r_c = UNet(cfg)
        self.r_n = UNet(cfg)
        self.register_buffer("bias", raw_bias_map(cfg.resolution, cfg.surface_offset, cfg.init_opacity),
                             persistent=False)
        self.register_buffer("parity", checker_parity(cfg.resolution), persistent=False)

    def to_raw(self, head_out):
        """(B, 28, H, W) head output -> (B, H, W, 14) raw map (front head on even pixels)."""
        b = head_out.shape[0]
        both = head_out.reshape(b, 2, RAW_DIM, *head_out.shape[-2:]) + self.bias
        raw = torch.where(self.parity, both[:, 1], both[:, 0])
        return raw.permute(0, 2, 3, 1)

    def forward(self, f_c, f_g, hooks=None) -> TwinsActivations:
        return twins_forward(f_c, f_g, self, hooks)


def _record(acts: TwinsActivations, hooks, name: str, value):
    if hooks and name in hooks:
        value = hooks[name](value)
    if not torch.isfinite(value).all():
        raise NumericError(name, "non-finite activation")
    acts.maps[name] = value
    return value


def twins_forward(f_c, f_g, model: TwinsUNet, hooks=None) -> TwinsActivations:
    """Run both U-Nets. ``f_c``: (B, C, H, W); ``f_g``: (B, n_q, d) or (n_q, d).

    ``hooks`` maps an activation name to a function that may replace it.
    """
    if f_g.ndim == 2:
        f_g = f_g[None].expand(f_c.shape[0], -1, -1)
    if f_c.shape[0] != f_g.shape[0]:
        raise InputError("F_c and F_g batch sizes differ")
    acts = TwinsActivations()
    f_c = _record(acts, hooks, "F_c", f_c)
    f_g = _record(acts, hooks, "F_g", f_g)
    xc, skips_c = model.r_c.down_path(f_c, f_g)
    xn, skips_n = model.r_n.down_path(f_c, f_g)
    xc = _record(acts, hooks, "F_c0", xc)
    xn = _record(acts, hooks, "F_n0", xn)
    fuse = model.cfg.fusion
    if fuse:
        fused = _record(acts, hooks, "F_f0", xc + xn)
        xc = xn = fused
    for k in range(1, N_STAGES + 1):
        xc = _record(acts, hooks, f"UB{k}_in_c", xc)
        xn = _record(acts, hooks, f"UB{k}_in_n", xn)
        xc = _record(acts, hooks, f"F_c{k}", model.r_c.up_block(k, xc, skips_c))
        xn = _record(acts, hooks, f"F_n{k}", model.r_n.up_block(k, xn, skips_n))
        if fuse:
            fused = _record(acts, hooks, f"F_f{k}", xc + xn)
            xc = xn = fused
    _record(acts, hooks, "raw_c", model.to_raw(model.r_c.output(xc)))
    _record(acts, hooks, "raw_n", model.to_raw(model.r_n.output(xn)))
    return acts


def encode_image(image, model: TwinsUNet):
    """(H, W, 3) or (B, H, W, 3) image -> (B, base_width, H, W) color features."""
    img = _as_image_batch(image)
    return model.encoder(img.permute(0, 3, 1, 2))


def _as_image_batch(image) -> torch.Tensor:
    img = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image, dtype=np.float32))
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[-1] != 3:
        raise InputError(f"expected HxWx3 image(s), got {tuple(img.shape)}")
    return img.float()


def decode_gaussians(raw, kind: Kind = Kind.TEXTURE) -> GaussianSet:
    """(H, W, 14) raw map -> GaussianSet of H*W Gaussians in raster order."""
    raw = raw.detach() if isinstance(raw, torch.Tensor) else torch.as_tensor(np.asarray(raw))
    if raw.ndim != 3 or raw.shape[-1] != RAW_DIM:
        raise InputError(f"raw map must be HxWx14, got {tuple(raw.shape)}")
    flat = raw.reshape(-1, RAW_DIM)
    if not torch.isfinite(flat).all():
        bad = int(torch.nonzero(~torch.isfinite(flat).all(dim=1))[0, 0])
        activate_raw_params(flat[bad].numpy())  # raises the domain error
    return GaussianSet.from_splats(activate(flat.double()), kind)


@dataclass(frozen=True)
class ModelConfig:
    twins: TwinsConfig = field(default_factory=TwinsConfig)
    anatomy: AnatomyConfig = field(default_factory=AnatomyConfig)
    shape_module: bool = True  # False zeroes F_g (ablation)

    def validate(self) -> None:
        self.twins.validate()
        self.anatomy.validate()
        if self.twins.shape_width != self.anatomy.width:
            raise ConfigError("twins shape_width must equal anatomy width")


class Reconstructor(nn.Module):
    """Image + part labels -> raw texture and normal Gaussian maps in one forward pass."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        self.anatomy = AnatomyShaping(cfg.anatomy)
        self.twins = TwinsUNet(cfg.twins)

    def shape_features(self, image, label_mask) -> torch.Tensor:
        if not self.cfg.shape_module:
            a = self.cfg.anatomy
            return torch.zeros(a.n_query, a.width)
        return self.anatomy(image, label_mask)

    def forward(self, image, label_mask, hooks=None) -> TwinsActivations:
        img = _as_image_batch(image)[0]
        f_g = self.shape_features(img, label_mask)
        f_c = encode_image(img, self.twins)
        return twins_forward(f_c, f_g[None], self.twins, hooks)


def reconstruct(image, label_mask, model: Reconstructor):
    """(G_c, G_n) for one image."""
    with torch.no_grad():
        acts = model(image, label_mask)
    return decode_gaussians(acts.raw_c[0], Kind.TEXTURE), decode_gaussians(acts.raw_n[0], Kind.NORMAL)
