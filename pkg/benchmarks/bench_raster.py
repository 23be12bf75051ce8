"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_raster.py [--size 128] [--gaussians 4096] [--repeat 3]

Prints one row per kernel with the best wall time of each backend, the
speed-up, and the largest output difference between the two.
"""
import argparse
import timeit

import numpy as np
import torch

from splathuman import _backend
from splathuman.camera import orbit_camera
from splathuman.gaussians import Splats
from splathuman.mesh import icosphere
from splathuman.render import render_splats


def random_splats(n: int, seed: int) -> Splats:
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    t = lambda a: torch.tensor(a, dtype=torch.float64, requires_grad=True)
    return Splats(t(rng.uniform(-0.6, 0.6, (n, 3))), t(rng.uniform(0.005, 0.03, (n, 3))),
                  t(q / np.linalg.norm(q, axis=1, keepdims=True)), t(rng.uniform(0.1, 0.9, n)),
                  t(rng.uniform(0, 1, (n, 3))))


def bench_render(backend: str, splats: Splats, size: int):
    cam = orbit_camera(30.0, size)

    def run():
        out = render_splats(splats, cam, backend=backend)
        (out.color.sum() + out.alpha.sum()).backward()
        return out.color.detach().numpy()

    return run


def bench_raster_mesh(backend: str, size: int):
    mesh = icosphere(5, 0.6)
    xy, depth = orbit_camera(30.0, size).project(mesh.vertices)
    core = _backend.get_core(backend)
    return lambda: core.raster_mesh(np.ascontiguousarray(xy), np.ascontiguousarray(depth), mesh.faces, size, size)[0]


def bench_density(backend: str, n: int, resolution: int):
    rng = np.random.default_rng(1)
    centers = rng.uniform(-0.5, 0.5, (n, 3))
    scale = rng.uniform(0.02, 0.05, n)
    inv6 = np.zeros((n, 6))
    inv6[:, [0, 3, 5]] = (1.0 / scale**2)[:, None]
    radius = scale * np.sqrt(2 * np.log(1e5))
    opacity = rng.uniform(0.2, 1.0, n)
    core = _backend.get_core(backend)
    spacing = 2.0 / (resolution - 1)
    return lambda: core.density_grid(centers, inv6, radius, opacity, np.full(3, -1.0), spacing, resolution)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--gaussians", type=int, default=4096)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    if _backend.BACKEND != "cython":
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    torch.set_num_threads(1)
    splats = random_splats(args.gaussians, 0)
    cases = {
        f"render fwd+bwd ({args.gaussians} splats, {args.size}px)": lambda b: bench_render(b, splats, args.size),
        f"raster_mesh (20480 faces, {args.size}px)": lambda b: bench_raster_mesh(b, args.size),
        f"density_grid ({args.gaussians} splats, {args.grid}^3)": lambda b: bench_density(b, args.gaussians, args.grid),
    }
    print(f"{'kernel':48s} {'cython s':>10s} {'python s':>10s} {'speed-up':>9s} {'max diff':>10s}")
    for name, make in cases.items():
        times, outs = {}, {}
        for backend in ("cython", "python"):
            fn = make(backend)
            outs[backend] = np.asarray(fn(), dtype=np.float64)
            times[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        diff = float(np.abs(outs["cython"] - outs["python"]).max())
        print(f"{name:48s} {times['cython']:10.4f} {times['python']:10.4f} "
              f"{times['python'] / times['cython']:8.1f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
