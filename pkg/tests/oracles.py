"""Independent reference implementations used by the tests.

Everything here is written directly from the defining formulas with plain
loops or dense numpy, sharing no code with the package under test.
"""
import math

import numpy as np
import torch

from splathuman.gaussians import Splats


def brute_nearest(src, dst):
    d = np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1))
    return d.min(axis=1), d.argmin(axis=1)


def brute_chamfer(p, s):
    return float(brute_nearest(p, s)[0].mean()), float(brute_nearest(s, p)[0].mean())


def brute_f_score(p, s, tau):
    precision = float(np.mean(brute_nearest(p, s)[0] <= tau))
    recall = float(np.mean(brute_nearest(s, p)[0] <= tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


def brute_normal_consistency(p, pn, g, gn):
    total_a = 0.0
    for i in range(len(p)):
        j = int(np.argmin(((g - p[i]) ** 2).sum(1)))
        total_a += float(pn[i] @ gn[j])
    total_b = 0.0
    for j in range(len(g)):
        i = int(np.argmin(((p - g[j]) ** 2).sum(1)))
        total_b += float(gn[j] @ pn[i])
    return 0.5 * (total_a / len(p) + total_b / len(g))


def quat_matrix(q):
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def composite_pixel(gaussians, cam, px, py, background, eps=0.1):
    """Front-to-back composite of one pixel, evaluated from the textbook formula.

    ``gaussians`` is a list of (center, scale, quat, opacity, color) tuples.
    """
    entries = []
    for idx, (c, s, q, o, col) in enumerate(gaussians):
        r = quat_matrix(q)
        cov = r @ np.diag(np.asarray(s, float) ** 2) @ r.T
        pc = cam.rotation @ np.asarray(c, float) + cam.translation
        u = cam.width / 2 + pc[0] / cam.pixel_scale
        v = cam.height / 2 - pc[1] / cam.pixel_scale
        jac = np.array([[1, 0, 0], [0, -1, 0]]) @ cam.rotation / cam.pixel_scale
        cov2 = jac @ cov @ jac.T + eps * np.eye(2)
        d = np.array([px - u, py - v])
        a = o * math.exp(-0.5 * d @ np.linalg.inv(cov2) @ d)
        entries.append((-pc[2], idx, a, np.asarray(col, float)))
    entries.sort(key=lambda e: (e[0], e[1]))
    color = np.zeros(3)
    trans = 1.0
    for _, _, a, col in entries:
        color += trans * a * col
        trans *= 1.0 - a
    return color + trans * np.asarray(background, float), 1.0 - trans


def random_scene(rng, n, extent=0.5):
    """(n, 14) float64 post-activation parameters with well separated depths."""
    c = rng.uniform(-extent, extent, (n, 3))
    s = rng.uniform(0.05, 0.3, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    o = rng.uniform(0.2, 0.99, n)
    col = rng.uniform(0.0, 1.0, (n, 3))
    return np.concatenate([c, s, q, o[:, None], col], axis=1)


def splats_of(p):
    t = torch.as_tensor(p)
    return Splats(t[:, 0:3], t[:, 3:6], t[:, 6:10], t[:, 10], t[:, 11:14])


def central_difference(f, x, h=1e-4):
    """Central differences of scalar ``f`` at every entry of the float64 array ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_errors(analytic, numeric, floor=1e-6):
    mask = np.abs(analytic) > floor
    return np.abs(analytic[mask] - numeric[mask]) / np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_matrix(q / np.linalg.norm(q))
