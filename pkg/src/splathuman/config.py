"""Flat ``key = value`` configuration.

Every key has a default; unknown keys and unparsable values are errors.
Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .anatomy import AnatomyConfig
from .errors import ConfigError
from .twins import ModelConfig, TwinsConfig

LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    # model
    resolution: int = 128
    base_width: int = 64
    widths: tuple = (64, 128, 256, 512, 512)
    attn_heads: int = 4
    fusion: bool = True
    shape_module: bool = True
    crop_size: int = 224
    patch_size: int = 16
    shape_width: int = 256
    n_query: int = 16
    n_blocks: int = 2
    shape_heads: int = 8
    # training
    steps: int = 2000
    lr: float = 2e-4
    warmup_steps: int = 0
    lr_schedule: str = "cosine"  # constant | cosine (decays to 0 at ``steps``)
    grad_clip: float = 1.0  # global gradient norm limit, 0 disables
    n_views: int = 8
    views_per_step: int = 4
    w_mse: float = 1.0
    w_mask: float = 1.0
    w_perc: float = 0.5
    supervision_supersample: int = 2
    checkpoint_every: int = 500
    # remeshing
    remesh_resolution: int = 128
    iso: float = 0.3
    remesh_steps: int = 400
    remesh_step_size: float = 5e-3
    laplacian_weight: float = 0.1
    remesh_views: int = 8
    remesh_image_size: int = 256
    # evaluation
    eval_points: int = 100_000
    fscore_tau: float = 1.0
    eval_resolution: int = 256
    # dataset
    image_size: int = 128
    grid_resolution: int = 160

    def validate(self) -> "Settings":
        if self.steps < 0 or self.remesh_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.lr < 0 or self.remesh_step_size < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be non-negative")
        if min(self.w_mse, self.w_mask, self.w_perc, self.laplacian_weight) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 1 <= self.views_per_step <= self.n_views:
            raise ConfigError("views_per_step must lie in 1..n_views")
        if self.remesh_resolution < 8:
            raise ConfigError("remesh_resolution must be at least 8")
        if self.iso <= 0:
            raise ConfigError("iso must be positive")
        if self.fscore_tau <= 0:
            raise ConfigError("fscore_tau must be positive")
        if self.image_size != self.resolution:
            raise ConfigError("image_size must equal the model resolution")
        self.model_config().validate()
        return self

    def model_config(self) -> ModelConfig:
        twins = TwinsConfig(resolution=self.resolution, widths=tuple(self.widths), base_width=self.base_width,
                            shape_width=self.shape_width, attn_heads=self.attn_heads, fusion=self.fusion)
        anatomy = AnatomyConfig(crop_size=self.crop_size, patch_size=self.patch_size, width=self.shape_width,
                                n_query=self.n_query, n_blocks=self.n_blocks, heads=self.shape_heads)
        return ModelConfig(twins=twins, anatomy=anatomy, shape_module=self.shape_module)

    def replace(self, **changes) -> "Settings":
        return dataclasses.replace(self, **changes).validate()


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is tuple:
        return tuple(int(v) for v in text.replace(",", " ").split())
    return kind(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}


def parse_config(text: str, base: Settings | None = None) -> Settings:
    known = {f.name: _TYPES[f.type] for f in fields(Settings)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(known[key], value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return dataclasses.replace(base or Settings(), **values).validate()


def load_config(path) -> Settings:
    return parse_config(Path(path).read_text())


def format_config(settings: Settings) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(settings, f.name))}\n" for f in fields(Settings))


def save_config(settings: Settings, path) -> None:
    Path(path).write_text(format_config(settings))
