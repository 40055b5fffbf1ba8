# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: im2col/col2im convolution, global max-pool argmax, and the
fused triplet angle/Huber loss. Mirrors ``amtml._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


cdef _im2col(const double[:, :, :, ::1] x, Py_ssize_t k):
    """Rows are (n, y, x) output positions, columns are (c, i, j) taps;
    zero padding keeps the spatial size."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t p = k // 2, ni, ci, y, xx, i, j, yy, xs, row, col
    cols_arr = np.zeros((n * h * wd, c * k * k))
    cdef double[:, ::1] cols = cols_arr
    for ni in range(n):
        for y in range(h):
            for xx in range(wd):
                row = (ni * h + y) * wd + xx
                col = 0
                for ci in range(c):
                    for i in range(k):
                        yy = y + i - p
                        for j in range(k):
                            xs = xx + j - p
                            if 0 <= yy < h and 0 <= xs < wd:
                                cols[row, col] = x[ni, ci, yy, xs]
                            col += 1
    return cols_arr


cdef _col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t wd,
             Py_ssize_t k):
    cdef Py_ssize_t p = k // 2, ni, ci, y, xx, i, j, yy, xs, row, col
    gx_arr = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] gx = gx_arr
    for ni in range(n):
        for y in range(h):
            for xx in range(wd):
                row = (ni * h + y) * wd + xx
                col = 0
                for ci in range(c):
                    for i in range(k):
                        yy = y + i - p
                        for j in range(k):
                            xs = xx + j - p
                            if 0 <= yy < h and 0 <= xs < wd:
                                gx[ni, ci, yy, xs] += cols[row, col]
                            col += 1
    return gx_arr


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], wd = x.shape[3], o = w.shape[0]
    wmat = np.asarray(w).reshape(o, -1)
    out = _im2col(x, w.shape[2]) @ wmat.T + np.asarray(b)
    return np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    gmat = np.ascontiguousarray(np.asarray(gout).transpose(0, 2, 3, 1)).reshape(-1, o)
    wmat = np.asarray(w).reshape(o, -1)
    gw = (gmat.T @ _im2col(x, k)).reshape(o, c, k, k)
    gx = _col2im(np.ascontiguousarray(gmat @ wmat), n, c, h, wd, k)
    return gx, gw, gmat.sum(axis=0)


def max_pool_argmax(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    vals_arr = np.empty((n, c))
    idx_arr = np.empty((n, c), dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef Py_ssize_t ni, ci, y, xx, best
    cdef double m, v
    for ni in range(n):
        for ci in range(c):
            m = x[ni, ci, 0, 0]
            best = 0
            for y in range(h):
                for xx in range(wd):
                    v = x[ni, ci, y, xx]
                    if v > m:
                        m = v
                        best = y * wd + xx
            vals[ni, ci] = m
            idx[ni, ci] = best
    return vals_arr, idx_arr


def max_pool_backward(const double[:, ::1] gout, const cnp.int64_t[:, ::1] idx,
                      Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], ni, ci, f
    gx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] gx = gx_arr
    for ni in range(n):
        for ci in range(c):
            f = idx[ni, ci]
            gx[ni, ci, f // w, f % w] = gout[ni, ci]
    return gx_arr


cdef inline int _cos(const double[:, ::1] x, Py_ssize_t a, Py_ssize_t b, Py_ssize_t c,
                     double eps, double* nu, double* nv, double* cosv) noexcept nogil:
    cdef Py_ssize_t q, kdim = x.shape[1]
    cdef double su = 0.0, sv = 0.0, dot = 0.0, du, dv
    for q in range(kdim):
        du = x[a, q] - x[b, q]
        dv = x[c, q] - x[b, q]
        su += du * du
        sv += dv * dv
        dot += du * dv
    nu[0] = sqrt(su)
    nv[0] = sqrt(sv)
    if nu[0] <= eps or nv[0] <= eps:
        return 0
    cosv[0] = dot / (nu[0] * nv[0])
    return 1


cdef inline void _scatter(const double[:, ::1] x, double[:, ::1] g, Py_ssize_t a,
                          Py_ssize_t b, Py_ssize_t c, double nu, double nv,
                          double cosv, double coef) noexcept nogil:
    cdef Py_ssize_t q, kdim = x.shape[1]
    cdef double inv = 1.0 / (nu * nv), cu = cosv / (nu * nu), cv = cosv / (nv * nv)
    cdef double u, v, gu, gv
    for q in range(kdim):
        u = x[a, q] - x[b, q]
        v = x[c, q] - x[b, q]
        gu = (v * inv - cu * u) * coef
        gv = (u * inv - cv * v) * coef
        g[a, q] += gu
        g[c, q] += gv
        g[b, q] -= gu + gv


def angle_huber(const double[:, ::1] target, const double[:, ::1] student,
                trip_in, double eps):
    g_t_arr = np.zeros((target.shape[0], target.shape[1]))
    g_s_arr = np.zeros((student.shape[0], student.shape[1]))
    if len(trip_in) == 0:
        return 0.0, 0, g_t_arr, g_s_arr
    cdef const cnp.int64_t[:, ::1] trip = np.ascontiguousarray(trip_in, dtype=np.int64)
    cdef double[:, ::1] g_t = g_t_arr
    cdef double[:, ::1] g_s = g_s_arr
    cdef Py_ssize_t r, i, j, k
    cdef double nut, nvt, ct, nus, nvs, cs, d, ad, slope, total = 0.0
    cdef Py_ssize_t count = 0
    with nogil:
        for r in range(trip.shape[0]):
            i = trip[r, 0]
            j = trip[r, 1]
            k = trip[r, 2]
            if not _cos(target, i, j, k, eps, &nut, &nvt, &ct):
                continue
            if not _cos(student, i, j, k, eps, &nus, &nvs, &cs):
                continue
            d = ct - cs
            ad = fabs(d)
            if ad <= 1.0:
                total += 0.5 * d * d
                slope = d
            else:
                total += ad - 0.5
                slope = 1.0 if d > 0 else -1.0
            count += 1
            _scatter(target, g_t, i, j, k, nut, nvt, ct, slope)
            _scatter(student, g_s, i, j, k, nus, nvs, cs, -slope)
    return total, count, g_t_arr, g_s_arr
