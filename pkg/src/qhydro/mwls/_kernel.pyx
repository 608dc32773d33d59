# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stencil-operator builder for the cubic weighted least-squares fits."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, sqrt

cnp.import_array()

cdef enum:
    NB = 10

cdef int _build_one(const double[:, ::1] disp, double weight_scale, double[:, ::1] op,
                    double* cond) noexcept nogil:
    cdef int n = disp.shape[0]
    cdef int i, j, k, r
    cdef double scale = 0.0, d, w, s, inv
    cdef double p[NB]
    cdef double A[NB][NB]
    cdef double g[NB]
    cdef double dmax, dmin
    cdef int deg[NB]
    deg[0] = 0; deg[1] = 1; deg[2] = 1
    deg[3] = 2; deg[4] = 2; deg[5] = 2
    deg[6] = 3; deg[7] = 3; deg[8] = 3; deg[9] = 3

    for k in range(n):
        d = sqrt(disp[k, 0] * disp[k, 0] + disp[k, 1] * disp[k, 1])
        if d > scale:
            scale = d
    if scale == 0.0:
        cond[0] = 1e300
        return 1
    inv = 1.0 / scale

    for i in range(NB):
        for j in range(NB):
            A[i][j] = 0.0
    for k in range(n):
        _basis(disp[k, 0] * inv, disp[k, 1] * inv, p)
        d = sqrt(disp[k, 0] * disp[k, 0] + disp[k, 1] * disp[k, 1]) * inv / weight_scale
        w = exp(-d * d)
        for i in range(NB):
            for j in range(i + 1):
                A[i][j] += w * p[i] * p[j]

    # in-place Cholesky, lower triangle
    for j in range(NB):
        s = A[j][j]
        for k in range(j):
            s -= A[j][k] * A[j][k]
        if not s > 0.0:
            cond[0] = 1e300
            return 1
        A[j][j] = sqrt(s)
        for i in range(j + 1, NB):
            s = A[i][j]
            for k in range(j):
                s -= A[i][k] * A[j][k]
            A[i][j] = s / A[j][j]
    dmax = A[0][0]
    dmin = A[0][0]
    for j in range(1, NB):
        if A[j][j] > dmax:
            dmax = A[j][j]
        if A[j][j] < dmin:
            dmin = A[j][j]
    cond[0] = (dmax / dmin) * (dmax / dmin)

    # column k of the operator solves A g = w_k p_k
    for k in range(n):
        _basis(disp[k, 0] * inv, disp[k, 1] * inv, p)
        d = sqrt(disp[k, 0] * disp[k, 0] + disp[k, 1] * disp[k, 1]) * inv / weight_scale
        w = exp(-d * d)
        for i in range(NB):
            s = w * p[i]
            for r in range(i):
                s -= A[i][r] * g[r]
            g[i] = s / A[i][i]
        for i in range(NB - 1, -1, -1):
            s = g[i]
            for r in range(i + 1, NB):
                s -= A[r][i] * g[r]
            g[i] = s / A[i][i]
        for i in range(NB):
            op[i, k] = g[i] * inv ** deg[i]
    return 0


cdef inline void _basis(double xi, double eta, double* p) noexcept nogil:
    p[0] = 1.0
    p[1] = xi
    p[2] = eta
    p[3] = xi * xi
    p[4] = eta * eta
    p[5] = xi * eta
    p[6] = xi * xi * xi
    p[7] = eta * eta * eta
    p[8] = xi * xi * eta
    p[9] = xi * eta * eta


def build_operators(const double[:, :, ::1] disp, double weight_scale, int threads=1):
    """Per-stencil operators G with coefficients = G @ values.

    Returns ``(ops, cond, status)``; status 1 marks a failed factorization.
    """
    cdef Py_ssize_t M = disp.shape[0]
    cdef Py_ssize_t nb = disp.shape[1]
    ops_arr = np.zeros((M, NB, nb), dtype=np.float64)
    cond_arr = np.empty(M, dtype=np.float64)
    status_arr = np.zeros(M, dtype=np.int8)
    cdef double[:, :, ::1] ops = ops_arr
    cdef double[::1] cond = cond_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef Py_ssize_t m
    if threads < 1:
        threads = 1
    for m in prange(M, nogil=True, schedule="static", num_threads=threads):
        status[m] = _build_one(disp[m], weight_scale, ops[m], &cond[m])
    return ops_arr, cond_arr, status_arr
