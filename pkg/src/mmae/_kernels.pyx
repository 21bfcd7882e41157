# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  Semantics must stay identical to ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def nn_lasso_cd(double[:, ::1] gram, double[:, ::1] wtv, double[:, ::1] h0,
                double lam, int max_sweeps, double tol):
    cdef Py_ssize_t r = gram.shape[0]
    cdef Py_ssize_t n = wtv.shape[1]
    out_arr = np.array(h0, dtype=np.float64, copy=True)
    cdef double[:, ::1] h = out_arr
    cdef Py_ssize_t p, i, j
    cdef int sweep
    cdef double c, old, new, diff, gjj
    with nogil:
        for p in range(n):
            for sweep in range(max_sweeps):
                diff = 0.0
                for j in range(r):
                    gjj = gram[j, j]
                    old = h[j, p]
                    if gjj <= 0.0:
                        new = 0.0
                    else:
                        c = wtv[j, p]
                        for i in range(r):
                            if i != j:
                                c = c - gram[j, i] * h[i, p]
                        new = (c - lam) / gjj
                        if new < 0.0:
                            new = 0.0
                    h[j, p] = new
                    if fabs(new - old) > diff:
                        diff = fabs(new - old)
                if diff <= tol:
                    break
    return out_arr


def scatter_add_rows(double[:, ::1] g, cnp.intp_t[::1] idx, Py_ssize_t n):
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t d = g.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, c, row
    with nogil:
        for i in range(k):
            row = idx[i]
            for c in range(d):
                out[row, c] += g[i, c]
    return out_arr
