# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row kernels. Same contracts as ``maya._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, r, v
    out_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mean
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                v = (x[i, j] - mean) * r
                xhat[i, j] = v
                out[i, j] = v * gamma[j] + beta[j]
    return out_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] dy, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    cdef double m1, m2, g
    dx_arr = np.empty((n, d), dtype=np.float64)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_fwd(const double[:, ::1] x, mask):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double big, total, e
    cdef const unsigned char[:, ::1] m
    cdef bint masked = mask is not None
    if masked:
        m = mask
    out_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            big = -INFINITY
            for j in range(d):
                if (not masked or m[i, j] == 0) and x[i, j] > big:
                    big = x[i, j]
            total = 0.0
            for j in range(d):
                if masked and m[i, j] != 0:
                    out[i, j] = 0.0
                else:
                    e = exp(x[i, j] - big)
                    out[i, j] = e
                    total += e
            for j in range(d):
                out[i, j] /= total
    return out_arr


def softmax_bwd(const double[:, ::1] dy, const double[:, ::1] y):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    cdef double dot
    dx_arr = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return dx_arr


def scatter_add_rows(double[:, ::1] out, const cnp.int64_t[::1] indices,
                     const double[:, ::1] rows):
    cdef Py_ssize_t n = rows.shape[0], d = rows.shape[1], i, j, r
    with nogil:
        for i in range(n):
            r = indices[i]
            for j in range(d):
                out[r, j] += rows[i, j]
    return np.asarray(out)
