# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay result-identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


def segment_sum(const double[:, ::1] values, const int64_t[::1] ids, Py_ssize_t n):
    cdef Py_ssize_t rows = values.shape[0], cols = values.shape[1]
    out_arr = np.zeros((n, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef int64_t s
    with nogil:
        for i in range(rows):
            s = ids[i]
            for j in range(cols):
                out[s, j] += values[i, j]
    return out_arr


def segment_max(const double[:, ::1] values, const int64_t[::1] ids, Py_ssize_t n):
    cdef Py_ssize_t rows = values.shape[0], cols = values.shape[1]
    out_arr = np.full((n, cols), -np.inf, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef int64_t s
    with nogil:
        for i in range(rows):
            s = ids[i]
            for j in range(cols):
                if values[i, j] > out[s, j]:
                    out[s, j] = values[i, j]
    return out_arr


def pair_counts(const int64_t[::1] items, const int64_t[::1] offsets, int64_t epsilon):
    cdef Py_ssize_t n_sessions = offsets.shape[0] - 1
    cdef Py_ssize_t total = 0, s, t, d, start, stop, k = 0
    for s in range(n_sessions):
        start = offsets[s]
        stop = offsets[s + 1]
        for t in range(start, stop):
            for d in range(1, epsilon + 1):
                if t + d >= stop:
                    break
                if items[t] != items[t + d]:
                    total += 1
    src_arr = np.empty(total, dtype=np.int64)
    dst_arr = np.empty(total, dtype=np.int64)
    dist_arr = np.empty(total, dtype=np.int64)
    cdef int64_t[::1] src = src_arr, dst = dst_arr, dist = dist_arr
    with nogil:
        for s in range(n_sessions):
            start = offsets[s]
            stop = offsets[s + 1]
            for t in range(start, stop):
                for d in range(1, epsilon + 1):
                    if t + d >= stop:
                        break
                    if items[t] != items[t + d]:
                        src[k] = items[t]
                        dst[k] = items[t + d]
                        dist[k] = d
                        k += 1
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy(), empty.copy()
    order = np.lexsort((dist_arr, dst_arr, src_arr))
    src_arr, dst_arr, dist_arr = src_arr[order], dst_arr[order], dist_arr[order]
    change = np.empty(total, dtype=bool)
    change[0] = True
    change[1:] = (src_arr[1:] != src_arr[:-1]) | (dst_arr[1:] != dst_arr[:-1]) | (dist_arr[1:] != dist_arr[:-1])
    starts = np.flatnonzero(change)
    counts = np.diff(np.append(starts, total))
    return src_arr[starts], dst_arr[starts], dist_arr[starts], counts.astype(np.int64)


def edge_logits(const double[:, :, ::1] A, const int64_t[::1] src, const double[::1] w,
                const int64_t[::1] pidx, const double[::1] u, const double[:, ::1] ptab,
                const double[::1] q, double slope):
    cdef Py_ssize_t E = src.shape[0], K = A.shape[1], D = A.shape[2]
    out_arr = np.empty((E, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, k, d
    cdef int64_t s, p
    cdef double we, z, acc
    with nogil:
        for e in range(E):
            s = src[e]
            p = pidx[e]
            we = w[e]
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    z = A[s, k, d] + we * u[d] + ptab[p, d]
                    if z <= 0:
                        z = z * slope
                    acc = acc + q[d] * z
                out[e, k] = acc
    return out_arr


def edge_logits_backward(const double[:, ::1] g, const double[:, :, ::1] A, const int64_t[::1] src,
                         const double[::1] w, const int64_t[::1] pidx, const double[::1] u,
                         const double[:, ::1] ptab, const double[::1] q, double slope):
    cdef Py_ssize_t E = src.shape[0], K = A.shape[1], D = A.shape[2]
    dA_arr = np.zeros((A.shape[0], K, D), dtype=np.float64)
    du_arr = np.zeros(D, dtype=np.float64)
    dp_arr = np.zeros((ptab.shape[0], D), dtype=np.float64)
    dq_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, :, ::1] dA = dA_arr
    cdef double[::1] du = du_arr, dq = dq_arr
    cdef double[:, ::1] dp = dp_arr
    cdef Py_ssize_t e, k, d
    cdef int64_t s, p
    cdef double we, z, ge, dz
    with nogil:
        for e in range(E):
            s = src[e]
            p = pidx[e]
            we = w[e]
            for k in range(K):
                ge = g[e, k]
                for d in range(D):
                    z = A[s, k, d] + we * u[d] + ptab[p, d]
                    if z > 0:
                        dz = ge * q[d]
                    else:
                        dz = ge * q[d] * slope
                        z = z * slope
                    dq[d] += ge * z
                    dA[s, k, d] += dz
                    du[d] += we * dz
                    dp[p, d] += dz
    return dA_arr, du_arr, dp_arr, dq_arr


def weighted_gather_sum(const double[:, ::1] theta, const double[:, :, ::1] X, const int64_t[::1] src,
                        const int64_t[::1] dst, Py_ssize_t n):
    cdef Py_ssize_t E = src.shape[0], K = X.shape[1], F = X.shape[2]
    out_arr = np.zeros((n, K, F), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t e, k, f
    cdef int64_t s, t
    cdef double a
    with nogil:
        for e in range(E):
            s = src[e]
            t = dst[e]
            for k in range(K):
                a = theta[e, k]
                for f in range(F):
                    out[t, k, f] += a * X[s, k, f]
    return out_arr


def weighted_gather_sum_backward(const double[:, :, ::1] g, const double[:, ::1] theta,
                                 const double[:, :, ::1] X, const int64_t[::1] src, const int64_t[::1] dst):
    cdef Py_ssize_t E = src.shape[0], K = X.shape[1], F = X.shape[2]
    dtheta_arr = np.zeros((E, K), dtype=np.float64)
    dX_arr = np.zeros((X.shape[0], K, F), dtype=np.float64)
    cdef double[:, ::1] dtheta = dtheta_arr
    cdef double[:, :, ::1] dX = dX_arr
    cdef Py_ssize_t e, k, f
    cdef int64_t s, t
    cdef double a, acc
    with nogil:
        for e in range(E):
            s = src[e]
            t = dst[e]
            for k in range(K):
                a = theta[e, k]
                acc = 0.0
                for f in range(F):
                    acc = acc + g[t, k, f] * X[s, k, f]
                    dX[s, k, f] += a * g[t, k, f]
                dtheta[e, k] = acc
    return dtheta_arr, dX_arr
