"""Pure-Python theta-scheme march (fallback for the compiled kernel)."""

import numpy as np
from scipy.linalg import solve_banded


def theta_march(lower, diag, upper, u0, theta, dt, nsteps):
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    u = np.array(u0, dtype=float)
    n = u.shape[0]
    nt = diag.shape[0]
    out = np.empty((nsteps + 1, n))
    out[0] = u
    ab = np.empty((3, n))
    for k in range(nsteps):
        r0 = k if nt > 1 else 0
        r1 = k + 1 if nt > 1 else 0
        au = diag[r0] * u
        au[1:] += lower[r0, 1:] * u[:-1]
        au[:-1] += upper[r0, :-1] * u[1:]
        rhs = u + (1.0 - theta) * dt * au
        ab[0, 1:] = -theta * dt * upper[r1, :-1]
        ab[0, 0] = 0.0
        ab[1] = 1.0 - theta * dt * diag[r1]
        ab[2, :-1] = -theta * dt * lower[r1, 1:]
        ab[2, -1] = 0.0
        u = solve_banded((1, 1), ab, rhs, check_finite=False)
        out[k + 1] = u
    return out
