# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled theta-scheme march for tridiagonal operators."""

import numpy as np


def theta_march(const double[:, :] lower, const double[:, :] diag, const double[:, :] upper,
                const double[:] u0, double theta, double dt, Py_ssize_t nsteps):
    """March ``u' = A u`` with the theta scheme; see ``kolmokernel.kernels``."""
    cdef Py_ssize_t n = u0.shape[0]
    cdef Py_ssize_t nt = diag.shape[0]
    cdef Py_ssize_t k, i, r0, r1
    cdef double ex = (1.0 - theta) * dt
    cdef double im = theta * dt
    cdef double a, b, c, m, v
    out = np.empty((nsteps + 1, n), dtype=np.float64)
    cdef double[:, ::1] U = out
    cdef double[::1] rhs = np.empty(n, dtype=np.float64)
    cdef double[::1] cp = np.empty(n, dtype=np.float64)

    for i in range(n):
        U[0, i] = u0[i]
    if n == 0:
        return out

    for k in range(nsteps):
        r0 = k if nt > 1 else 0
        r1 = k + 1 if nt > 1 else 0
        # explicit part
        for i in range(n):
            v = diag[r0, i] * U[k, i]
            if i > 0:
                v += lower[r0, i] * U[k, i - 1]
            if i < n - 1:
                v += upper[r0, i] * U[k, i + 1]
            rhs[i] = U[k, i] + ex * v
        # implicit part: Thomas algorithm on (I - im A)
        b = 1.0 - im * diag[r1, 0]
        c = -im * upper[r1, 0] if n > 1 else 0.0
        cp[0] = c / b
        rhs[0] = rhs[0] / b
        for i in range(1, n):
            a = -im * lower[r1, i]
            b = 1.0 - im * diag[r1, i]
            c = -im * upper[r1, i] if i < n - 1 else 0.0
            m = b - a * cp[i - 1]
            cp[i] = c / m
            rhs[i] = (rhs[i] - a * rhs[i - 1]) / m
        U[k + 1, n - 1] = rhs[n - 1]
        for i in range(n - 2, -1, -1):
            U[k + 1, i] = rhs[i] - cp[i] * U[k + 1, i + 1]
    return out
