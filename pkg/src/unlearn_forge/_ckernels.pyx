# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the text and distribution metrics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def lcs_length(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef cnp.int64_t ai, diag, up, best
    if n == 0 or m == 0:
        return 0
    cdef cnp.int64_t[::1] row = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        diag = 0
        for j in range(m):
            up = row[j + 1]
            if ai == b[j]:
                best = diag + 1
            else:
                best = up if up > row[j] else row[j]
            diag = up
            row[j + 1] = best
    return int(row[m])


def ks_statistic(const double[::1] a, const double[::1] b):
    """Sup-norm ECDF distance; both inputs must be sorted ascending."""
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], i = 0, j = 0
    cdef double d = 0.0, diff, v
    while i < na and j < nb:
        v = a[i] if a[i] <= b[j] else b[j]
        while i < na and a[i] == v:
            i += 1
        while j < nb and b[j] == v:
            j += 1
        diff = <double>i / na - <double>j / nb
        if diff < 0:
            diff = -diff
        if diff > d:
            d = diff
    return d
