# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled surface kernels used by the ASSD metric."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def surface_mask(m):
    """Voxels that are set and have a 6-neighbor unset or lie on the volume border."""
    return _surface_mask_u8(np.ascontiguousarray(m, dtype=np.uint8))


def _surface_mask_u8(cnp.uint8_t[:, :, ::1] m):
    cdef Py_ssize_t D = m.shape[0], H = m.shape[1], W = m.shape[2]
    out_arr = np.zeros((D, H, W), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    for i in range(D):
        for j in range(H):
            for k in range(W):
                if not m[i, j, k]:
                    continue
                if (i == 0 or j == 0 or k == 0 or i == D - 1 or j == H - 1 or k == W - 1
                        or not m[i - 1, j, k] or not m[i + 1, j, k]
                        or not m[i, j - 1, k] or not m[i, j + 1, k]
                        or not m[i, j, k - 1] or not m[i, j, k + 1]):
                    out[i, j, k] = 1
    return out_arr.astype(bool)


cdef void _envelope_1d(double* f, Py_ssize_t n, Py_ssize_t stride, double w,
                       double* out, Py_ssize_t* v, double* z, double* xs) noexcept nogil:
    """Exact 1-D squared distance transform: out[p] = min_q (w*(p-q))^2 + f[q*stride].

    Lower envelope of parabolas; infinite f entries contribute no parabola.
    """
    cdef Py_ssize_t q, p, k = -1
    cdef double s, x
    for q in range(n):
        if f[q * stride] == INFINITY:
            continue
        x = w * q
        while k >= 0:
            s = ((f[q * stride] + x * x) - (f[v[k] * stride] + xs[k] * xs[k])) / (2.0 * (x - xs[k]))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        xs[k] = x
        z[k] = -INFINITY if k == 0 else s
    if k < 0:
        for p in range(n):
            out[p] = INFINITY
        return
    z[k + 1] = INFINITY
    q = 0
    for p in range(n):
        x = w * p
        while z[q + 1] < x:
            q += 1
        out[p] = (x - xs[q]) * (x - xs[q]) + f[v[q] * stride]


def squared_edt(target, spacing):
    """Squared Euclidean distance (mm^2) from every voxel to the nearest ``target`` voxel (inf if none)."""
    t = np.ascontiguousarray(target, dtype=bool)
    grid_arr = np.where(t, 0.0, np.inf)
    cdef double[:, :, ::1] g = grid_arr
    cdef Py_ssize_t D = g.shape[0], H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t n = max(D, H, W), i, j, k
    buf_arr = np.empty(n, dtype=np.float64)
    z_arr = np.empty(n + 1, dtype=np.float64)
    xs_arr = np.empty(n, dtype=np.float64)
    v_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] buf = buf_arr, z = z_arr, xs = xs_arr
    cdef Py_ssize_t[::1] v = v_arr
    cdef double sz = spacing[0], sy = spacing[1], sx = spacing[2]
    if D == 0 or H == 0 or W == 0:
        return grid_arr
    with nogil:
        for i in range(D):
            for j in range(H):
                _envelope_1d(&g[i, j, 0], W, 1, sx, &buf[0], &v[0], &z[0], &xs[0])
                for k in range(W):
                    g[i, j, k] = buf[k]
        for i in range(D):
            for k in range(W):
                _envelope_1d(&g[i, 0, k], H, W, sy, &buf[0], &v[0], &z[0], &xs[0])
                for j in range(H):
                    g[i, j, k] = buf[j]
        for j in range(H):
            for k in range(W):
                _envelope_1d(&g[0, j, k], D, H * W, sz, &buf[0], &v[0], &z[0], &xs[0])
                for i in range(D):
                    g[i, j, k] = buf[i]
    return grid_arr


def directed_distances(src, dst, spacing):
    """For each set voxel of ``src``, the distance (mm) to the nearest set voxel of ``dst``."""
    d2 = squared_edt(dst, spacing)
    return np.sqrt(d2[np.asarray(src, dtype=bool)])


def surface_distances(surf_a, surf_b, spacing):
    return directed_distances(surf_a, surf_b, spacing), directed_distances(surf_b, surf_a, spacing)
