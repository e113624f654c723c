"""Backend selection for the tridiagonal theta-scheme march.

``theta_march(lower, diag, upper, u0, theta, dt, nsteps)`` integrates
``u' = A u`` where ``A`` is tridiagonal with rows ``(lower[i], diag[i], upper[i])``
coupling ``u[i-1], u[i], u[i+1]``. Coefficient arrays have shape ``(1, n)``
(constant operator) or ``(nsteps + 1, n)`` (row ``k`` is the operator at
level ``k``). Step ``k -> k+1`` solves

    (I - theta dt A_{k+1}) u_{k+1} = (I + (1 - theta) dt A_k) u_k

and the result has shape ``(nsteps + 1, n)`` with ``u0`` in row 0.

The compiled extension is used when it was built; set
``KOLMOKERNEL_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels.theta_march}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels.theta_march

_requested = os.environ.get("KOLMOKERNEL_BACKEND", "").strip().lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"requested kernel backend {_requested!r} is not available")
BACKEND = _requested or ("cython" if "cython" in BACKENDS else "python")


def theta_march(lower, diag, upper, u0, theta, dt, nsteps, backend=None):
    fn = BACKENDS[backend or BACKEND]
    return fn(lower, diag, upper, u0, float(theta), float(dt), int(nsteps))
