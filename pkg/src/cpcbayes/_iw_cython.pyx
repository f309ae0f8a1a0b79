# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled backend for the joint sampler's hot kernel.

Mirrors ``_iw_numpy.iw_terms``: per-subject state-dependent part of the
inverse-Wishart log likelihood. The per-subject model matrix is built in a
triangular loop and factorized in place with LAPACK dpotrf.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log
from scipy.linalg.cython_lapack cimport dpotrf

cnp.import_array()


def iw_terms(double[:, ::1] b, double[:, ::1] c, double[:, :, ::1] gamma_inv,
             double nu0, double eps):
    """Vector of s_n, shape (N,)."""
    cdef Py_ssize_t p = b.shape[0]
    cdef Py_ssize_t k = b.shape[1]
    cdef Py_ssize_t n = c.shape[1]
    cdef double q = nu0 - p - 1.0

    out_arr = np.empty(n, dtype=np.float64)
    a_arr = np.empty((p, p), dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[:, ::1] a = a_arr

    cdef Py_ssize_t nn, i, j, kk
    cdef double acc, inner, logdet
    cdef int info, pi
    pi = <int> p

    for nn in range(n):
        # A = B diag(c_n) B^T + eps I, lower triangle mirrored to full
        for i in range(p):
            for j in range(i + 1):
                acc = 0.0
                for kk in range(k):
                    acc += b[i, kk] * c[kk, nn] * b[j, kk]
                a[i, j] = acc
                a[j, i] = acc
            a[i, i] += eps
        inner = 0.0
        for i in range(p):
            for j in range(p):
                inner += a[i, j] * gamma_inv[nn, i, j]
        # dpotrf on the C-order symmetric buffer (row/col major coincide)
        info = 0
        dpotrf("L", &pi, &a[0, 0], &pi, &info)
        if info != 0:
            raise np.linalg.LinAlgError(
                f"dpotrf failed for subject {nn} (info={info})")
        logdet = 0.0
        for i in range(p):
            logdet += log(a[i, i])
        out[nn] = 0.5 * nu0 * 2.0 * logdet - 0.5 * q * inner
    return out_arr
