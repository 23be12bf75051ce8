"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Loops run over primitives (Gaussians, faces) and vectorize over the pixels
or voxels each one touches, which keeps the sequential compositing order
identical to the compiled kernel.
"""
from __future__ import annotations

import math

import numpy as np


def _splat_bbox(mx, my, a, b, c, o, cutoff, width, height):
    if cutoff <= 0.0:
        return 0, width, 0, height
    if o <= cutoff:
        return 0, 0, 0, 0
    lam = 0.5 * (a + c) - math.sqrt(0.25 * (a - c) ** 2 + b * b)
    if lam <= 0.0:
        return 0, width, 0, height
    r = math.sqrt(2.0 * math.log(o / cutoff) / lam)
    x0 = int(max(0.0, math.ceil(mx - r)))
    x1 = int(min(float(width), math.floor(mx + r) + 1.0))
    y0 = int(max(0.0, math.ceil(my - r)))
    y1 = int(min(float(height), math.floor(my + r) + 1.0))
    return x0, max(x0, x1), y0, max(y0, y1)


def rasterize_forward(means2d, conics, opacity, colors, depths, order, background,
                      width, height, cutoff):
    nc = colors.shape[1]
    npix = width * height
    acc = np.zeros((npix, nc))
    trans = np.ones(npix)
    dep = np.zeros(npix)
    rec_pix, rec_gid, rec_t = [], [], []
    for g in order:
        mx, my = means2d[g]
        a, b, c = conics[g]
        x0, x1, y0, y1 = _splat_bbox(mx, my, a, b, c, opacity[g], cutoff, width, height)
        if x1 <= x0 or y1 <= y0:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        pix = (ys * width + xs).ravel()
        dx = xs.ravel() - mx
        dy = ys.ravel() - my
        alpha = opacity[g] * np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        t = trans[pix]
        w = alpha * t
        keep = ~(w < cutoff)
        pix, alpha, t, w = pix[keep], alpha[keep], t[keep], w[keep]
        acc[pix] += w[:, None] * colors[g][None, :]
        dep[pix] += w * depths[g]
        trans[pix] = t * (1.0 - alpha)
        rec_pix.append(pix.astype(np.int32))
        rec_gid.append(np.full(pix.shape, g, dtype=np.int32))
        rec_t.append(t)
    acc += trans[:, None] * np.asarray(background)[None, :]
    cat = (lambda parts, dt: np.concatenate(parts) if parts else np.zeros(0, dtype=dt))
    return (acc.reshape(height, width, nc), trans.reshape(height, width),
            dep.reshape(height, width), cat(rec_pix, np.int32), cat(rec_gid, np.int32),
            cat(rec_t, np.float64))


def _record_runs(rec_gid):
    """Split the record stream into maximal runs that share one Gaussian."""
    if rec_gid.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(rec_gid)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [rec_gid.size]])
    return list(zip(starts, stops))


def rasterize_backward(grad_color, grad_alpha, grad_depth, means2d, conics, opacity,
                       colors, depths, background, width, rec_pix, rec_gid, rec_t):
    n = means2d.shape[0]
    nc = colors.shape[1]
    npix = grad_alpha.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, nc))
    g_dep = np.zeros(n)
    suf = np.tile(np.asarray(background, dtype=np.float64), (npix, 1))
    sufq = np.ones(npix)
    sufd = np.zeros(npix)
    # each Gaussian touches a pixel at most once, so a run can be processed as one block
    for start, stop in reversed(_record_runs(rec_gid)):
        g = rec_gid[start]
        pix = rec_pix[start:stop].astype(np.int64)
        t = rec_t[start:stop]
        y = pix // width
        x = pix - y * width
        a, b, c = conics[g]
        dx = x - means2d[g, 0]
        dy = y - means2d[g, 1]
        gauss = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        alpha = opacity[g] * gauss
        at = alpha * t
        gc = grad_color[pix]
        dl_da = (gc * (colors[g][None, :] - suf[pix])).sum(axis=1)
        g_col[g] += (gc * at[:, None]).sum(axis=0)
        dl_da += grad_depth[pix] * (depths[g] - sufd[pix])
        g_dep[g] += (grad_depth[pix] * at).sum()
        dl_da = t * dl_da + grad_alpha[pix] * t * sufq[pix]
        suf[pix] = alpha[:, None] * colors[g][None, :] + (1.0 - alpha)[:, None] * suf[pix]
        sufd[pix] = alpha * depths[g] + (1.0 - alpha) * sufd[pix]
        sufq[pix] = sufq[pix] * (1.0 - alpha)
        g_opac[g] += (dl_da * gauss).sum()
        dq = -0.5 * dl_da * alpha
        g_conic[g, 0] += (dq * dx * dx).sum()
        g_conic[g, 1] += (dq * 2.0 * dx * dy).sum()
        g_conic[g, 2] += (dq * dy * dy).sum()
        g_mean[g, 0] -= (dq * (2.0 * a * dx + 2.0 * b * dy)).sum()
        g_mean[g, 1] -= (dq * (2.0 * b * dx + 2.0 * c * dy)).sum()
    return g_mean, g_conic, g_opac, g_col, g_dep


def raster_mesh(xy, depth, faces, width, height):
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    eps = -1e-10
    for f, (i0, i1, i2) in enumerate(faces):
        (x0, y0), (x1, y1), (x2, y2) = xy[i0], xy[i1], xy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if -1e-12 < area < 1e-12:
            continue
        xa = int(max(0.0, math.ceil(min(x0, x1, x2))))
        xb = int(min(width - 1.0, math.floor(max(x0, x1, x2))))
        ya = int(max(0.0, math.ceil(min(y0, y1, y2))))
        yb = int(min(height - 1.0, math.floor(max(y0, y1, y2))))
        if xb < xa or yb < ya:
            continue
        ys, xs = np.mgrid[ya:yb + 1, xa:xb + 1]
        w0 = ((x1 - xs) * (y2 - ys) - (x2 - xs) * (y1 - ys)) / area
        w1 = ((x2 - xs) * (y0 - ys) - (x0 - xs) * (y2 - ys)) / area
        w2 = 1.0 - w0 - w1
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        hit = (w0 >= eps) & (w1 >= eps) & (w2 >= eps) & (z < zbuf[ys, xs])
        if not hit.any():
            continue
        hy, hx = ys[hit], xs[hit]
        zbuf[hy, hx] = z[hit]
        face_id[hy, hx] = f
        bary[hy, hx] = np.stack([w0[hit], w1[hit], w2[hit]], axis=-1)
    return face_id, bary, zbuf


def density_grid(centers, inv_cov, radius, opacity, origin, spacing, n):
    grid = np.zeros((n, n, n))
    for g in range(centers.shape[0]):
        r = radius[g]
        if r <= 0.0:
            continue
        c = centers[g]
        lo = np.maximum(0, np.ceil((c - r - origin) / spacing)).astype(int)
        hi = np.minimum(n - 1, np.floor((c + r - origin) / spacing)).astype(int)
        if np.any(hi < lo):
            continue
        ax = [origin[d] + np.arange(lo[d], hi[d] + 1) * spacing - c[d] for d in range(3)]
        dx, dy, dz = np.meshgrid(*ax, indexing="ij")
        xx, xy_, xz, yy, yz, zz = inv_cov[g]
        q = (xx * dx * dx + yy * dy * dy + zz * dz * dz
             + 2.0 * (xy_ * dx * dy + xz * dx * dz + yz * dy * dz))
        grid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] += opacity[g] * np.exp(-0.5 * q)
    return grid
