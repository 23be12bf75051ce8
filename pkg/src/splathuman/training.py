"""Training loop for the reconstructor."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import circle_cameras
from .checkpoint import save_model
from .config import Settings, format_config
from .errors import InputError, NumericError
from .gaussians import activate
from .losses import NORMAL_BACKGROUND, TEXTURE_BACKGROUND, LossWeights, loss_2d, render_supervision
from .render import render_splats
from .twins import Reconstructor

log = logging.getLogger(__name__)

LOG_HEADER = "step,total,mse,mask,perc,normal_total"


@dataclass
class TrainResult:
    model: Reconstructor
    history: list = field(default_factory=list)  # one dict per step
    checkpoints: list = field(default_factory=list)


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def build_model(settings: Settings) -> Reconstructor:
    torch.manual_seed(settings.seed)
    return Reconstructor(settings.model_config())


def step_loss(model: Reconstructor, sample, views, weights: LossWeights):
    """Loss of one scan over a view subset; returns (total, breakdown)."""
    image = torch.from_numpy(np.ascontiguousarray(sample.front_image, dtype=np.float32))
    acts = model(image, sample.label_mask)
    g_c = activate(acts.raw_c[0].reshape(-1, 14))
    g_n = activate(acts.raw_n[0].reshape(-1, 14))
    tex = {"total": 0.0, "mse": 0.0, "mask": 0.0, "perc": 0.0}
    normal_total = 0.0
    for v in views:
        lc, terms = loss_2d(render_splats(g_c, v.camera, TEXTURE_BACKGROUND), v.color, v.mask, weights)
        ln, _ = loss_2d(render_splats(g_n, v.camera, NORMAL_BACKGROUND), v.normal, v.mask, weights)
        tex["total"] = tex["total"] + lc
        for k in ("mse", "mask", "perc"):
            tex[k] = tex[k] + terms[k]
        normal_total = normal_total + ln
    n = len(views)
    breakdown = {k: v / n for k, v in tex.items()}
    breakdown["normal_total"] = normal_total / n
    return (tex["total"] + normal_total) / n, breakdown


def learning_rate(settings: Settings, step: int) -> float:
    """Linear warmup times the optional cosine decay to 0 at ``settings.steps``."""
    lr = settings.lr
    if settings.warmup_steps:
        lr *= min(1.0, (step + 1) / settings.warmup_steps)
    if settings.lr_schedule == "cosine" and settings.steps:
        lr *= 0.5 * (1.0 + math.cos(math.pi * step / settings.steps))
    return lr


def _fmt(x) -> str:
    return repr(float(x))


def train(samples, settings: Settings, out_dir=None, model: Reconstructor | None = None,
          supervision=None) -> TrainResult:
    """Optimize the reconstructor on ``samples`` with 2D render losses.

    Writes ``metrics.csv`` and periodic ``step_XXXXXX.ckpt`` files under
    ``out_dir`` when given.
    """
    if not samples:
        raise InputError("training needs at least one scan")
    seed_everything(settings.seed)
    model = model or build_model(settings)
    model.train()
    cams = circle_cameras(settings.n_views, settings.resolution)
    if supervision is None:
        supervision = [render_supervision(s, cams, settings.supervision_supersample) for s in samples]
    weights = LossWeights(settings.w_mse, settings.w_mask, settings.w_perc)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.csv", "w")
        log_fh.write(LOG_HEADER + "\n")
    result = TrainResult(model)
    meta = {"config": format_config(settings)}
    try:
        for step in range(settings.steps):
            idx = int(rng.integers(len(samples)))
            chosen = np.sort(rng.choice(settings.n_views, settings.views_per_step, replace=False))
            total, parts = step_loss(model, samples[idx], [supervision[idx][int(c)] for c in chosen], weights)
            values = {k: float(v.detach()) for k, v in parts.items()}
            values["total_all"] = float(total.detach())
            if not math.isfinite(values["total_all"]):
                raise NumericError(f"step {step}", f"non-finite loss, terms {values}")
            for g in opt.param_groups:
                g["lr"] = learning_rate(settings, step)
            opt.zero_grad(set_to_none=True)
            total.backward()
            if settings.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, settings.grad_clip)
            if settings.lr > 0:
                opt.step()
            result.history.append(values)
            if log_fh:
                log_fh.write(",".join([str(step), _fmt(values["total_all"]), _fmt(values["mse"]), _fmt(values["mask"]),
                                       _fmt(values["perc"]), _fmt(values["normal_total"])]) + "\n")
            if step % 50 == 0:
                log.info("step %d loss %.5f", step, values["total_all"])
            if out and settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
                path = out / f"step_{step + 1:06d}.ckpt"
                save_model(path, model, dict(meta, step=step + 1))
                result.checkpoints.append(path)
    finally:
        if log_fh:
            log_fh.close()
    if out:
        path = out / "model.ckpt"
        save_model(path, model, dict(meta, step=settings.steps))
        result.checkpoints.append(path)
    model.eval()
    return result
