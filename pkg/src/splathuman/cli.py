"""Command-line interface: ``splathuman <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .camera import circle_cameras, front_back_cameras
from .config import Settings, load_config, save_config
from .dataset import build_dataset, load_image, load_label_png, load_manifest, load_samples
from .errors import SplatHumanError
from .gaussians import Kind, load_splat, save_splat
from .humanoid import HumanoidConfig
from .mesh import load_mesh, render_color, render_normal, save_mesh
from .metrics import evaluate, report_row, write_report
from .pipeline import ABLATIONS, load_model, remesh_gaussians, run_ablation, texture_views
from .render import render, save_png, save_render
from .training import train
from .twins import reconstruct

log = logging.getLogger("splathuman")


def _settings(path) -> Settings:
    return load_config(path) if path else Settings()


def cmd_synth_data(args) -> int:
    settings = _settings(args.config)
    cfg = HumanoidConfig(grid_resolution=settings.grid_resolution)
    manifest = build_dataset(args.n, args.seed, args.out, cfg, settings.image_size)
    print(f"wrote {len(manifest.entries)} scans to {args.out}")
    return 0


def cmd_train(args) -> int:
    settings = _settings(args.config)
    samples = load_samples(load_manifest(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(settings, out / "config.txt")
    result = train(samples, settings, out)
    print(f"trained {settings.steps} steps; final loss {result.history[-1]['total_all']:.6f}" if result.history
          else "no training steps requested")
    return 0


def cmd_reconstruct(args) -> int:
    model, settings = load_model(args.checkpoint)
    image = torch.from_numpy(load_image(args.image))
    labels = load_label_png(args.mask)
    g_c, g_n = reconstruct(image, labels, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_splat(g_c, out / "texture.splat")
    save_splat(g_n, out / "normal.splat")
    with torch.no_grad():
        for cam in circle_cameras(args.views, args.size or settings.eval_resolution):
            save_png(render(g_c, cam).color, out / f"turntable_{cam.name}.png")
    print(f"wrote {out / 'texture.splat'}, {out / 'normal.splat'} and {args.views} turntable views")
    return 0


def cmd_remesh(args) -> int:
    settings = _settings(args.config)
    g_n = load_splat(args.normal_splat)
    if g_n.kind != Kind.NORMAL:
        log.warning("%s holds texture Gaussians; remeshing anyway", args.normal_splat)
    mesh = remesh_gaussians(g_n, settings)
    out = Path(args.out)
    if out.suffix.lower() not in (".obj", ".ply"):
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mesh.obj"
    save_mesh(mesh, out)
    print(f"wrote {out} ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return 0


def cmd_evaluate(args) -> int:
    settings = _settings(args.config)
    pred, gt = load_mesh(args.pred), load_mesh(args.gt)
    images = None
    if args.texture_splat:
        images, _ = texture_views(load_splat(args.texture_splat), settings)
    geo, tex = evaluate(pred, gt, front_back_cameras(settings.eval_resolution), settings.eval_points,
                        settings.fscore_tau, seed=0, pred_images=images, align=args.align)
    case = args.case or Path(args.pred).stem
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.csv"
    text = write_report([report_row(case, geo, tex)], out)
    sys.stdout.write(text)
    return 0


def cmd_render(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = circle_cameras(args.views, args.size)
    if args.splat:
        gset = load_splat(args.splat)
        bg = (0.5, 0.5, 0.5) if gset.kind == Kind.NORMAL else (1.0, 1.0, 1.0)
        with torch.no_grad():
            for cam in cams:
                save_render(render(gset, cam, bg), out / cam.name)
    else:
        mesh = load_mesh(args.mesh)
        for cam in cams:
            save_png(render_color(mesh, cam)[0], out / f"{cam.name}_color.png")
            save_png(render_normal(mesh, cam)[0], out / f"{cam.name}_normal.png")
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_ablate(args) -> int:
    settings = _settings(args.config)
    text = run_ablation(args.data, settings, args.out, tuple(args.variants or ABLATIONS))
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splathuman", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate synthetic scans and a manifest")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train the reconstructor on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="image + label mask -> texture/normal splats + turntable")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("remesh", help="normal splat -> refined OBJ mesh")
    s.add_argument("--normal-splat", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_remesh)

    s = sub.add_parser("evaluate", help="geometry and texture metrics as CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--texture-splat", help="use renders of these Gaussians for the texture metrics")
    s.add_argument("--case")
    s.add_argument("--config")
    s.add_argument("--align", action="store_true", help="rigidly register the prediction to the ground truth")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="render a splat or mesh on the camera circle")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--splat")
    src.add_argument("--mesh")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--variants", nargs="*", choices=ABLATIONS)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SplatHumanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
