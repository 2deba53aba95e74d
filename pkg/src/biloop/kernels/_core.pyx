# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for soft/hard residual aggregation and pairwise distances.

Same arithmetic as biloop.kernels.numpy_backend, evaluated with tight C loops
in float64. Kept in lock-step with the fallback; the parity tests compare the
two element-wise.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def vlad_aggregate_soft(double[:, ::1] x, double[:, ::1] centers,
                        double[:, ::1] weights, double[::1] biases):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = centers.shape[0]
    cdef cnp.ndarray[double, ndim=2] v_arr = np.zeros((k, d))
    cdef cnp.ndarray[double, ndim=2] a_arr = np.empty((n, k))
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] a = a_arr
    cdef double[::1] colsum = np.zeros(k)
    cdef Py_ssize_t i, j, c
    cdef double m, s, logit, w

    for i in range(n):
        m = -INFINITY
        for c in range(k):
            logit = biases[c]
            for j in range(d):
                logit += weights[c, j] * x[i, j]
            a[i, c] = logit
            if logit > m:
                m = logit
        s = 0.0
        for c in range(k):
            a[i, c] = exp(a[i, c] - m)
            s += a[i, c]
        for c in range(k):
            a[i, c] /= s
            w = a[i, c]
            colsum[c] += w
            for j in range(d):
                v[c, j] += w * x[i, j]
    for c in range(k):
        for j in range(d):
            v[c, j] -= colsum[c] * centers[c, j]
    return v_arr, a_arr


def vlad_aggregate_soft_backward(double[:, ::1] x, double[:, ::1] centers,
                                 double[:, ::1] weights, double[:, ::1] a,
                                 double[:, ::1] g_v):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = centers.shape[0]
    cdef cnp.ndarray[double, ndim=2] gx_arr = np.zeros((n, d))
    cdef cnp.ndarray[double, ndim=2] gc_arr = np.zeros((k, d))
    cdef cnp.ndarray[double, ndim=2] gw_arr = np.zeros((k, d))
    cdef cnp.ndarray[double, ndim=1] gb_arr = np.zeros(k)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gc = gc_arr
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[::1] gv_dot_c = np.empty(k)
    cdef double[::1] ga = np.empty(k)
    cdef double[::1] colsum = np.zeros(k)
    cdef Py_ssize_t i, j, c
    cdef double acc, inner, gl

    for c in range(k):
        acc = 0.0
        for j in range(d):
            acc += g_v[c, j] * centers[c, j]
        gv_dot_c[c] = acc

    for i in range(n):
        inner = 0.0
        for c in range(k):
            acc = 0.0
            for j in range(d):
                acc += x[i, j] * g_v[c, j]
            ga[c] = acc - gv_dot_c[c]
            inner += a[i, c] * ga[c]
            colsum[c] += a[i, c]
        for c in range(k):
            gl = a[i, c] * (ga[c] - inner)
            gb[c] += gl
            for j in range(d):
                gx[i, j] += a[i, c] * g_v[c, j] + gl * weights[c, j]
                gw[c, j] += gl * x[i, j]
    for c in range(k):
        for j in range(d):
            gc[c, j] = -colsum[c] * g_v[c, j]
    return gx_arr, gc_arr, gw_arr, gb_arr


def vlad_aggregate_hard(double[:, ::1] x, double[:, ::1] centers):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = centers.shape[0]
    cdef cnp.ndarray[double, ndim=2] v_arr = np.zeros((k, d))
    cdef cnp.ndarray[int, ndim=1] assign_arr = np.empty(n, dtype=np.int32)
    cdef double[:, ::1] v = v_arr
    cdef int[::1] assign = assign_arr
    cdef Py_ssize_t i, j, c
    cdef double best, dist, diff
    cdef Py_ssize_t best_c

    for i in range(n):
        best = INFINITY
        best_c = 0
        for c in range(k):
            dist = 0.0
            for j in range(d):
                diff = x[i, j] - centers[c, j]
                dist += diff * diff
            if dist < best:
                best = dist
                best_c = c
        assign[i] = <int>best_c
        for j in range(d):
            v[best_c, j] += x[i, j] - centers[best_c, j]
    return v_arr, assign_arr


def pairwise_sqdist(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], d = a.shape[1]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.empty((m, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, c
    cdef double acc, diff
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for c in range(d):
                diff = a[i, c] - b[j, c]
                acc += diff * diff
            out[i, j] = acc
    return out_arr
