"""End-to-end glue: checkpoints, reconstruction, remeshing, evaluation, ablations."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import circle_cameras, front_back_cameras
from .checkpoint import load_checkpoint, load_state, save_model
from .config import Settings, format_config, parse_config
from .dataset import ScanSample, load_manifest, load_samples
from .gaussians import GaussianSet, save_splat
from .metrics import GeoReport, TexReport, evaluate, report_row, write_report
from .mesh import TriMesh, save_mesh
from .remesh import RemeshConfig, init_coarse_mesh, refine_mesh
from .render import render
from .training import train
from .twins import Reconstructor, reconstruct

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_shape_module", "no_twins_fusion", "no_remeshing")


def load_model(path) -> tuple[Reconstructor, Settings]:
    tensors, meta = load_checkpoint(path)
    settings = parse_config(meta["config"])
    model = Reconstructor(settings.model_config())
    load_state(model, tensors)
    model.eval()
    return model, settings


def save_trained(path, model: Reconstructor, settings: Settings, step: int) -> None:
    save_model(path, model, {"config": format_config(settings), "step": step})


def remesh_config(settings: Settings, **overrides) -> RemeshConfig:
    cfg = dict(resolution=settings.remesh_resolution, iso=settings.iso, steps=settings.remesh_steps,
               step_size=settings.remesh_step_size, laplacian_weight=settings.laplacian_weight,
               views=settings.remesh_views, image_size=settings.remesh_image_size)
    cfg.update(overrides)
    return RemeshConfig(**cfg)


def reconstruct_sample(model: Reconstructor, sample: ScanSample):
    return reconstruct(torch.from_numpy(np.ascontiguousarray(sample.front_image)), sample.label_mask, model)


def remesh_gaussians(g_n: GaussianSet, settings: Settings, refine: bool = True) -> TriMesh:
    cfg = remesh_config(settings)
    coarse = init_coarse_mesh(g_n, cfg)
    if not refine or cfg.steps == 0:
        return coarse
    cams = circle_cameras(cfg.views, cfg.image_size)
    return refine_mesh(coarse, g_n, cams, cfg).mesh


def texture_views(g_c: GaussianSet, settings: Settings, resolution: int | None = None):
    cams = front_back_cameras(resolution or settings.eval_resolution)
    with torch.no_grad():
        return [render(g_c, cam).color.numpy() for cam in cams], cams


def evaluate_prediction(pred_mesh: TriMesh, gt: ScanSample, settings: Settings, g_c: GaussianSet | None = None):
    images, cams = (texture_views(g_c, settings) if g_c is not None
                    else (None, front_back_cameras(settings.eval_resolution)))
    return evaluate(pred_mesh, gt.mesh, cams, settings.eval_points, settings.fscore_tau, seed=0,
                    pred_images=images)


@dataclass
class CaseResult:
    case: str
    geo: GeoReport
    tex: TexReport
    mesh: TriMesh


def run_cases(model: Reconstructor, samples, settings: Settings, refine: bool = True, out_dir=None,
              prefix: str = "") -> list[CaseResult]:
    results = []
    for s in samples:
        g_c, g_n = reconstruct_sample(model, s)
        mesh = remesh_gaussians(g_n, settings, refine)
        geo, tex = evaluate_prediction(mesh, s, settings, g_c)
        name = f"{prefix}{s.meta.id}"
        if out_dir is not None:
            d = Path(out_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_splat(g_c, d / f"{s.meta.id}_texture.splat")
            save_splat(g_n, d / f"{s.meta.id}_normal.splat")
            save_mesh(mesh, d / f"{s.meta.id}.obj")
        results.append(CaseResult(name, geo, tex, mesh))
    return results


def ablation_settings(settings: Settings, variant: str) -> tuple[Settings, bool]:
    """(training settings, whether to refine the coarse mesh) for one ablation variant."""
    if variant == "full":
        return settings, True
    if variant == "no_shape_module":
        return settings.replace(shape_module=False), True
    if variant == "no_twins_fusion":
        return settings.replace(fusion=False), True
    if variant == "no_remeshing":
        return settings, False
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def run_ablation(data_dir, settings: Settings, out_dir, variants=ABLATIONS) -> str:
    """Train/evaluate each variant on the accepted scans; writes ``ablation.csv`` and returns it."""
    manifest = load_manifest(data_dir)
    samples = load_samples(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trained: dict[tuple, Reconstructor] = {}
    rows = []
    for variant in variants:
        vs, refine = ablation_settings(settings, variant)
        key = (vs.shape_module, vs.fusion)
        if key not in trained:
            log.info("training variant %s", variant)
            trained[key] = train(samples, vs, out / variant).model
        for r in run_cases(trained[key], samples, vs, refine, out / variant, prefix=f"{variant}/"):
            rows.append(report_row(r.case, r.geo, r.tex))
    return write_report(rows, out / "ablation.csv")
