# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Signatures and semantics mirror ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def softmax_masked_fwd(const double[:, ::1] x, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s, e
    cdef int n_empty = 0
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if mask[i, j] and x[i, j] > mx:
                mx = x[i, j]
        if mx == -INFINITY:
            n_empty += 1
            continue
        s = 0.0
        for j in range(m):
            if mask[i, j]:
                e = exp(x[i, j] - mx)
                y[i, j] = e
                s += e
        for j in range(m):
            y[i, j] = y[i, j] / s
    return out, n_empty


def softmax_masked_bwd(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gx = out
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, r, c
    y_arr = np.empty((n, d), dtype=np.float64)
    xh_arr = np.empty((n, d), dtype=np.float64)
    r_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xh = xh_arr
    cdef double[::1] rstd = r_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            c = (x[i, j] - mu) * r
            xh[i, j] = c
            y[i, j] = c * gamma[j] + beta[j]
    return y_arr, xh_arr, r_arr


def layer_norm_bwd(const double[:, ::1] gy, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    cdef double m1, m2, g
    gx_arr = np.empty((n, d), dtype=np.float64)
    gg_arr = np.zeros(d, dtype=np.float64)
    gb_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = gy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            gg[j] += gy[i, j] * xhat[i, j]
            gb[j] += gy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gx[i, j] = (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx_arr, gg_arr, gb_arr


def causal_time_grid(const double[:, ::1] t, const unsigned char[:, ::1] valid):
    cdef Py_ssize_t b = t.shape[0], L = t.shape[1], k, i, j
    cdef double diff
    dt_arr = np.zeros((b, L, L), dtype=np.float64)
    mask_arr = np.zeros((b, L, L), dtype=np.uint8)
    cdef double[:, :, ::1] dt = dt_arr
    cdef unsigned char[:, :, ::1] mask = mask_arr
    for k in range(b):
        for i in range(L):
            if not valid[k, i]:
                mask[k, i, i] = 1
                continue
            for j in range(L):
                if valid[k, j]:
                    diff = t[k, i] - t[k, j]
                    if diff >= 0.0:
                        mask[k, i, j] = 1
                        dt[k, i, j] = diff
    return dt_arr, mask_arr


def midrank(x):
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[0], i, j, k
    cdef cnp.intp_t[::1] order = np.argsort(xa, kind="mergesort")
    cdef double[::1] xv = xa
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double avg
    i = 0
    while i < n:
        j = i
        while j < n and xv[order[j]] == xv[order[i]]:
            j += 1
        avg = 0.5 * (i + j - 1) + 1.0
        for k in range(i, j):
            out[order[k]] = avg
        i = j
    return out_arr
