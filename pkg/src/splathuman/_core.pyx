# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: splat compositing (forward/backward), mesh z-buffer, density grid.

Every function here has a line-for-line numpy twin in ``_core_py``; the two
must stay numerically interchangeable (tests compare them).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, floor, ceil, INFINITY

cnp.import_array()


cdef inline void _splat_bbox(double mx, double my, double a, double b, double c,
                             double o, double cutoff, int width, int height,
                             int* out) noexcept nogil:
    cdef double lam, r
    if cutoff <= 0.0:
        out[0] = 0; out[1] = width; out[2] = 0; out[3] = height
        return
    if o <= cutoff:
        out[0] = 0; out[1] = 0; out[2] = 0; out[3] = 0
        return
    # smallest eigenvalue of the conic = 1 / largest eigenvalue of the covariance
    lam = 0.5 * (a + c) - sqrt(0.25 * (a - c) * (a - c) + b * b)
    if lam <= 0.0:
        out[0] = 0; out[1] = width; out[2] = 0; out[3] = height
        return
    r = sqrt(2.0 * log(o / cutoff) / lam)
    out[0] = <int>max(0.0, ceil(mx - r))
    out[1] = <int>min(<double>width, floor(mx + r) + 1.0)
    out[2] = <int>max(0.0, ceil(my - r))
    out[3] = <int>min(<double>height, floor(my + r) + 1.0)
    if out[1] < out[0]:
        out[1] = out[0]
    if out[3] < out[2]:
        out[3] = out[2]


def rasterize_forward(double[:, ::1] means2d, double[:, ::1] conics, double[::1] opacity,
                      double[:, ::1] colors, double[::1] depths, cnp.int64_t[::1] order,
                      double[::1] background, int width, int height, double cutoff):
    cdef Py_ssize_t n = means2d.shape[0]
    cdef Py_ssize_t nc = colors.shape[1]
    cdef Py_ssize_t npix = <Py_ssize_t>width * height
    cdef int[:, ::1] boxes = np.zeros((n, 4), dtype=np.int32)
    cdef Py_ssize_t k, g, total = 0, m = 0, ch, p
    cdef int x, y
    cdef int box[4]
    for g in range(n):
        _splat_bbox(means2d[g, 0], means2d[g, 1], conics[g, 0], conics[g, 1], conics[g, 2],
                    opacity[g], cutoff, width, height, box)
        boxes[g, 0] = box[0]; boxes[g, 1] = box[1]; boxes[g, 2] = box[2]; boxes[g, 3] = box[3]
        total += <Py_ssize_t>(box[1] - box[0]) * (box[3] - box[2])

    rec_pix_a = np.empty(total, dtype=np.int32)
    rec_gid_a = np.empty(total, dtype=np.int32)
    rec_t_a = np.empty(total, dtype=np.float64)
    acc_a = np.zeros((npix, nc), dtype=np.float64)
    trans_a = np.ones(npix, dtype=np.float64)
    dep_a = np.zeros(npix, dtype=np.float64)
    cdef int[::1] rec_pix = rec_pix_a
    cdef int[::1] rec_gid = rec_gid_a
    cdef double[::1] rec_t = rec_t_a
    cdef double[:, ::1] acc = acc_a
    cdef double[::1] trans = trans_a
    cdef double[::1] dep = dep_a
    cdef double mx, my, a, b, c, o, dx, dy, q, alpha, t, w, d

    with nogil:
        for k in range(n):
            g = order[k]
            mx = means2d[g, 0]; my = means2d[g, 1]
            a = conics[g, 0]; b = conics[g, 1]; c = conics[g, 2]
            o = opacity[g]; d = depths[g]
            for y in range(boxes[g, 2], boxes[g, 3]):
                dy = y - my
                for x in range(boxes[g, 0], boxes[g, 1]):
                    dx = x - mx
                    p = <Py_ssize_t>y * width + x
                    t = trans[p]
                    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                    alpha = o * exp(-0.5 * q)
                    w = alpha * t
                    if w < cutoff:
                        continue
                    for ch in range(nc):
                        acc[p, ch] += w * colors[g, ch]
                    dep[p] += w * d
                    trans[p] = t * (1.0 - alpha)
                    rec_pix[m] = <int>p
                    rec_gid[m] = <int>g
                    rec_t[m] = t
                    m += 1

    for p in range(npix):
        for ch in range(nc):
            acc[p, ch] += trans[p] * background[ch]
    return (acc_a.reshape(height, width, nc), trans_a.reshape(height, width),
            dep_a.reshape(height, width), rec_pix_a[:m].copy(), rec_gid_a[:m].copy(),
            rec_t_a[:m].copy())


def rasterize_backward(double[:, ::1] grad_color, double[::1] grad_alpha, double[::1] grad_depth,
                       double[:, ::1] means2d, double[:, ::1] conics, double[::1] opacity,
                       double[:, ::1] colors, double[::1] depths, double[::1] background,
                       int width, int[::1] rec_pix, int[::1] rec_gid, double[::1] rec_t):
    """Reverse sweep over the forward records; suffix sums replace any division by (1 - alpha)."""
    cdef Py_ssize_t n = means2d.shape[0]
    cdef Py_ssize_t nc = colors.shape[1]
    cdef Py_ssize_t npix = grad_alpha.shape[0]
    cdef Py_ssize_t m = rec_pix.shape[0]
    g_mean_a = np.zeros((n, 2), dtype=np.float64)
    g_conic_a = np.zeros((n, 3), dtype=np.float64)
    g_opac_a = np.zeros(n, dtype=np.float64)
    g_col_a = np.zeros((n, nc), dtype=np.float64)
    g_dep_a = np.zeros(n, dtype=np.float64)
    suf_a = np.empty((npix, nc), dtype=np.float64)
    suf_a[:] = np.asarray(background)[None, :]
    sufq_a = np.ones(npix, dtype=np.float64)
    sufd_a = np.zeros(npix, dtype=np.float64)
    cdef double[:, ::1] g_mean = g_mean_a
    cdef double[:, ::1] g_conic = g_conic_a
    cdef double[::1] g_opac = g_opac_a
    cdef double[:, ::1] g_col = g_col_a
    cdef double[::1] g_dep = g_dep_a
    cdef double[:, ::1] suf = suf_a
    cdef double[::1] sufq = sufq_a
    cdef double[::1] sufd = sufd_a
    cdef Py_ssize_t r, p, g, ch
    cdef int x, y
    cdef double mx, my, a, b, c, dx, dy, q, gauss, alpha, t, dl_da, dq, at

    with nogil:
        for r in range(m - 1, -1, -1):
            p = rec_pix[r]
            g = rec_gid[r]
            t = rec_t[r]
            y = <int>(p // width)
            x = <int>(p - <Py_ssize_t>y * width)
            mx = means2d[g, 0]; my = means2d[g, 1]
            a = conics[g, 0]; b = conics[g, 1]; c = conics[g, 2]
            dx = x - mx
            dy = y - my
            q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
            gauss = exp(-0.5 * q)
            alpha = opacity[g] * gauss
            at = alpha * t
            dl_da = 0.0
            for ch in range(nc):
                dl_da += grad_color[p, ch] * (colors[g, ch] - suf[p, ch])
                g_col[g, ch] += grad_color[p, ch] * at
            dl_da += grad_depth[p] * (depths[g] - sufd[p])
            g_dep[g] += grad_depth[p] * at
            dl_da = t * dl_da + grad_alpha[p] * t * sufq[p]
            for ch in range(nc):
                suf[p, ch] = alpha * colors[g, ch] + (1.0 - alpha) * suf[p, ch]
            sufd[p] = alpha * depths[g] + (1.0 - alpha) * sufd[p]
            sufq[p] = sufq[p] * (1.0 - alpha)

            g_opac[g] += dl_da * gauss
            dq = -0.5 * dl_da * alpha
            g_conic[g, 0] += dq * dx * dx
            g_conic[g, 1] += dq * 2.0 * dx * dy
            g_conic[g, 2] += dq * dy * dy
            g_mean[g, 0] -= dq * (2.0 * a * dx + 2.0 * b * dy)
            g_mean[g, 1] -= dq * (2.0 * b * dx + 2.0 * c * dy)
    return g_mean_a, g_conic_a, g_opac_a, g_col_a, g_dep_a


def raster_mesh(double[:, ::1] xy, double[::1] depth, cnp.int64_t[:, ::1] faces,
                int width, int height):
    """Z-buffer rasterization at integer pixel centres; nearest (smallest depth) face wins."""
    cdef Py_ssize_t nf = faces.shape[0]
    face_id_a = np.full((height, width), -1, dtype=np.int64)
    bary_a = np.zeros((height, width, 3), dtype=np.float64)
    zbuf_a = np.full((height, width), INFINITY, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] face_id = face_id_a
    cdef double[:, :, ::1] bary = bary_a
    cdef double[:, ::1] zbuf = zbuf_a
    cdef Py_ssize_t f, i0, i1, i2
    cdef int x, y, xa, xb, ya, yb
    cdef double x0, y0, x1, y1, x2, y2, area, w0, w1, w2, z
    cdef double eps = -1e-10
    with nogil:
        for f in range(nf):
            i0 = faces[f, 0]; i1 = faces[f, 1]; i2 = faces[f, 2]
            x0 = xy[i0, 0]; y0 = xy[i0, 1]
            x1 = xy[i1, 0]; y1 = xy[i1, 1]
            x2 = xy[i2, 0]; y2 = xy[i2, 1]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if area < 1e-12 and area > -1e-12:
                continue
            xa = <int>max(0.0, ceil(min(x0, min(x1, x2))))
            xb = <int>min(width - 1.0, floor(max(x0, max(x1, x2))))
            ya = <int>max(0.0, ceil(min(y0, min(y1, y2))))
            yb = <int>min(height - 1.0, floor(max(y0, max(y1, y2))))
            for y in range(ya, yb + 1):
                for x in range(xa, xb + 1):
                    w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area
                    if w0 < eps:
                        continue
                    w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area
                    if w1 < eps:
                        continue
                    w2 = 1.0 - w0 - w1
                    if w2 < eps:
                        continue
                    z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
                    if z < zbuf[y, x]:
                        zbuf[y, x] = z
                        face_id[y, x] = f
                        bary[y, x, 0] = w0
                        bary[y, x, 1] = w1
                        bary[y, x, 2] = w2
    return face_id_a, bary_a, zbuf_a


def density_grid(double[:, ::1] centers, double[:, ::1] inv_cov, double[::1] radius,
                 double[::1] opacity, double[::1] origin, double spacing, int n):
    """Accumulate opacity-weighted Gaussian densities on an n^3 lattice within per-Gaussian radii.

    inv_cov rows hold (xx, xy, xz, yy, yz, zz) of the inverse covariance.
    """
    grid_a = np.zeros((n, n, n), dtype=np.float64)
    cdef double[:, :, ::1] grid = grid_a
    cdef Py_ssize_t ng = centers.shape[0], g
    cdef int i, j, k, ia, ib, ja, jb, ka, kb
    cdef double cx, cy, cz, r, dx, dy, dz, q, o
    with nogil:
        for g in range(ng):
            o = opacity[g]
            r = radius[g]
            if r <= 0.0:
                continue
            cx = centers[g, 0]; cy = centers[g, 1]; cz = centers[g, 2]
            ia = <int>max(0.0, ceil((cx - r - origin[0]) / spacing))
            ib = <int>min(n - 1.0, floor((cx + r - origin[0]) / spacing))
            ja = <int>max(0.0, ceil((cy - r - origin[1]) / spacing))
            jb = <int>min(n - 1.0, floor((cy + r - origin[1]) / spacing))
            ka = <int>max(0.0, ceil((cz - r - origin[2]) / spacing))
            kb = <int>min(n - 1.0, floor((cz + r - origin[2]) / spacing))
            for i in range(ia, ib + 1):
                dx = origin[0] + i * spacing - cx
                for j in range(ja, jb + 1):
                    dy = origin[1] + j * spacing - cy
                    for k in range(ka, kb + 1):
                        dz = origin[2] + k * spacing - cz
                        q = (inv_cov[g, 0] * dx * dx + inv_cov[g, 3] * dy * dy
                             + inv_cov[g, 5] * dz * dz
                             + 2.0 * (inv_cov[g, 1] * dx * dy + inv_cov[g, 2] * dx * dz
                                      + inv_cov[g, 4] * dy * dz))
                        grid[i, j, k] += o * exp(-0.5 * q)
    return grid_a
