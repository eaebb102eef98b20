# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bitwise-compatible with _kernels_py."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def edit_distance(const long[::1] ref, const long[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0], i, j
    cdef long sub, ins, dele, best
    cdef long[::1] prev = np.arange(m + 1, dtype=np.int_)
    cdef long[::1] cur = np.empty(m + 1, dtype=np.int_)
    cdef long[::1] tmp
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                cur[j] = prev[j - 1]
            else:
                sub = prev[j - 1] + 1
                ins = cur[j - 1] + 1
                dele = prev[j] + 1
                best = sub
                if ins < best:
                    best = ins
                if dele < best:
                    best = dele
                cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def nearest_centroid(const double[:, ::1] x, const double[:, ::1] c):
    cdef Py_ssize_t n = x.shape[0], k = c.shape[0], d = x.shape[1], i, j, t
    cdef double best, dist, diff
    cdef Py_ssize_t arg
    labels_arr = np.empty(n, dtype=np.int64)
    dists_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] dists = dists_arr
    for i in range(n):
        arg = 0
        best = 0.0
        for j in range(k):
            dist = 0.0
            for t in range(d):
                diff = x[i, t] - c[j, t]
                dist = dist + diff * diff
            if j == 0 or dist < best:
                best = dist
                arg = j
        labels[i] = arg
        dists[i] = best
    return labels_arr, dists_arr


def run_starts(const cnp.int64_t[::1] labels):
    cdef Py_ssize_t n = labels.shape[0], i, count = 0
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    for i in range(n):
        if i == 0 or labels[i] != labels[i - 1]:
            out[count] = i
            count += 1
    return out_arr[:count].copy()
