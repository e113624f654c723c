"""Kolmogorov operators with (possibly unbounded) coefficients.

An operator acts on twice differentiable functions by

    A(s) f = Tr(Q(s, x) D^2 f) + F(s, x) . grad f - V(s, x) f

Coefficient maps are vectorised: every map takes a scalar time ``s`` and an
array of points of shape ``(n, d)`` and returns arrays with a leading axis of
length ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ArrayMap = Callable[[float, np.ndarray], np.ndarray]


def _as_points(x, d: int) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        # 1D: a flat array is a batch of scalars; otherwise it is one point
        pts = pts.reshape(-1, 1) if d == 1 else pts.reshape(1, -1)
    if pts.ndim != 2 or pts.shape[1] != d:
        raise ValueError(f"points have shape {np.shape(x)}, expected (n, {d})")
    return pts


# ---------------------------------------------------------------------------
# smoothed powers |x|_*^s
# ---------------------------------------------------------------------------

def _inner_quadratic(s: float) -> tuple[float, float, float]:
    """Coefficients of q(u) = c0 + c1 (u-1) + c2 (u-1)^2 matching u^(s/2) to 2nd order at u=1."""
    h = 0.5 * s
    return 1.0, h, 0.5 * h * (h - 1.0)


def _needs_smoothing(s: float) -> bool:
    return 0.0 < s < 2.0


def smooth_power_radial(s: float, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value and first two derivatives of ``|x|_*^s`` as a function of ``u = |x|^2``."""
    u = np.asarray(u, dtype=float)
    if s < 0:
        raise ValueError(f"smooth power exponent must be nonnegative, got {s}")
    if s == 0:
        return np.ones_like(u), np.zeros_like(u), np.zeros_like(u)
    h = 0.5 * s
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = u**h
        d1 = h * u ** (h - 1.0)
        d2 = h * (h - 1.0) * u ** (h - 2.0)
    if _needs_smoothing(s):
        c0, c1, c2 = _inner_quadratic(s)
        inner = u < 1.0
        val = np.where(inner, c0 + c1 * (u - 1.0) + c2 * (u - 1.0) ** 2, val)
        d1 = np.where(inner, c1 + 2.0 * c2 * (u - 1.0), d1)
        d2 = np.where(inner, 2.0 * c2, d2)
    return val, d1, d2


def eval_smooth_power(s: float, x, order: int = 0) -> np.ndarray:
    """Evaluate ``|x|_*^s``, its gradient (order 1) or its Hessian (order 2).

    ``|x|_*^s`` equals ``|x|^s`` for ``|x| >= 1``. For ``0 < s < 2`` the inner
    part is the quadratic in ``|x|^2`` that matches value and the first two
    radial derivatives at the unit sphere, so the result is C^2 on R^d.

    ``x`` may be a single point or a batch of shape ``(n, d)``; a batch returns
    arrays with a leading axis of length ``n``.
    """
    if s < 0:
        raise ValueError(f"smooth power exponent must be nonnegative, got {s}")
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1
    pts = arr.reshape(1, -1) if single else arr
    if arr.ndim == 0:
        pts = arr.reshape(1, 1)
    out = _smooth_power_batch(s, pts, order)
    return out[0] if single else out


def _smooth_power_batch(s: float, pts: np.ndarray, order: int) -> np.ndarray:
    u = np.einsum("ni,ni->n", pts, pts)
    val, d1, d2 = smooth_power_radial(s, u)
    if order == 0:
        return val
    if s >= 2.0:
        # exact power: guard the origin, where the derivative is finite
        d1 = np.where(u == 0.0, 1.0 if s == 2.0 else 0.0, d1)
        # u^(h-2) may blow up at 0 but multiplies x x^T = O(u)
        d2 = np.where(u == 0.0, 0.0, d2)
    if order == 1:
        return 2.0 * d1[:, None] * pts
    if order == 2:
        d = pts.shape[1]
        eye = np.eye(d)
        return 2.0 * d1[:, None, None] * eye + 4.0 * d2[:, None, None] * np.einsum("ni,nj->nij", pts, pts)
    raise ValueError("order must be 0, 1 or 2")


@dataclass(frozen=True)
class SmoothPower:
    """The map ``x -> |x|_*^s`` with its C^2 inner quadratic."""

    s: float

    def __post_init__(self):
        if self.s < 0:
            raise ValueError(f"smooth power exponent must be nonnegative, got {self.s}")

    @property
    def inner_coefficients(self) -> tuple[float, float, float]:
        if not _needs_smoothing(self.s):
            return (1.0, 0.0, 0.0) if self.s == 0 else (np.nan, np.nan, np.nan)
        return _inner_quadratic(self.s)

    def __call__(self, x, order: int = 0):
        return eval_smooth_power(self.s, x, order)


# ---------------------------------------------------------------------------
# coefficient fields and test functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientField:
    """Coefficients ``(Q, F, V)`` of a Kolmogorov operator on ``[0, 1] x R^d``.

    ``dQ(s, x)`` returns shape ``(n, d, d, d)`` with ``[:, k, i, j] = D_k q_ij``.
    ``family`` carries the parameters of a closed-form family (for example
    ``{"family": "example", "m": 0, "p": 3, "r": 2}``) when there is one.
    """

    d: int
    Q: ArrayMap
    dQ: ArrayMap
    F: ArrayMap
    V: ArrayMap
    eta: float
    holder: float = 0.5
    family: Optional[dict] = None
    time_dependent: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if not self.eta > 0:
            raise ValueError("ellipticity constant must be positive")

    def points(self, x) -> np.ndarray:
        return _as_points(x, self.d)

    def coefficients(self, s: float, x):
        pts = self.points(x)
        return self.Q(s, pts), self.F(s, pts), self.V(s, pts)

    def without_potential(self) -> "CoefficientField":
        """The field of ``A_0 = A + V``."""
        zero = lambda s, x: np.zeros(len(x))
        fam = None if self.family is None else {**self.family, "potential": "zeroed"}
        return CoefficientField(self.d, self.Q, self.dQ, self.F, zero, self.eta,
                                self.holder, fam, self.time_dependent)

    def with_potential(self, V: ArrayMap) -> "CoefficientField":
        fam = None if self.family is None else {**self.family, "potential": "replaced"}
        return CoefficientField(self.d, self.Q, self.dQ, self.F, V, self.eta,
                                self.holder, fam, self.time_dependent)


@dataclass(frozen=True)
class TestFunction:
    """A C^2 function with closed-form gradient and Hessian (vectorised)."""

    __test__ = False  # not a pytest class

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    support_radius: Optional[float] = None
    center: Optional[np.ndarray] = None

    def __add__(self, other: "TestFunction") -> "TestFunction":
        return combine(1.0, self, 1.0, other)

    def scaled(self, a: float) -> "TestFunction":
        return TestFunction(lambda x: a * self.value(x), lambda x: a * self.gradient(x),
                            lambda x: a * self.hessian(x), self.support_radius, self.center)


def combine(a: float, f: TestFunction, b: float, g: TestFunction) -> TestFunction:
    return TestFunction(
        lambda x: a * f.value(x) + b * g.value(x),
        lambda x: a * f.gradient(x) + b * g.gradient(x),
        lambda x: a * f.hessian(x) + b * g.hessian(x),
    )


def polynomial_test_function(coeffs: Sequence[float]) -> TestFunction:
    """1D polynomial ``sum c_k x^k`` as a test function."""
    c = np.asarray(coeffs, dtype=float)
    p = np.polynomial.Polynomial(c)
    dp, ddp = p.deriv(1), p.deriv(2)
    return TestFunction(
        lambda x: p(np.asarray(x)[:, 0]),
        lambda x: dp(np.asarray(x)[:, 0])[:, None],
        lambda x: ddp(np.asarray(x)[:, 0])[:, None, None],
    )


def gaussian_bump(center, width: float, amplitude: float = 1.0, cutoff: float = 6.0) -> TestFunction:
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``.

    ``support_radius`` is set to ``cutoff * width``, beyond which the bump is
    below ``exp(-cutoff^2 / 2)`` and is treated as compactly supported.
    """
    c = np.atleast_1d(np.asarray(center, dtype=float))
    w2 = width * width

    def value(x):
        z = x - c
        return amplitude * np.exp(-0.5 * np.einsum("ni,ni->n", z, z) / w2)

    def gradient(x):
        return -(x - c) / w2 * value(x)[:, None]

    def hessian(x):
        z = x - c
        d = x.shape[1]
        v = value(x)
        return (np.einsum("ni,nj->nij", z, z) / (w2 * w2) - np.eye(d) / w2) * v[:, None, None]

    return TestFunction(value, gradient, hessian, cutoff * width, c)


def smooth_power_function(s: float, coefficient: float = 1.0) -> TestFunction:
    return TestFunction(
        lambda x: coefficient * eval_smooth_power(s, x, 0),
        lambda x: coefficient * eval_smooth_power(s, x, 1),
        lambda x: coefficient * eval_smooth_power(s, x, 2),
    )


def exp_smooth_power(delta: float, beta: float) -> TestFunction:
    """``exp(delta |x|_*^beta)``."""

    def value(x):
        return np.exp(delta * eval_smooth_power(beta, x, 0))

    def gradient(x):
        return delta * eval_smooth_power(beta, x, 1) * value(x)[:, None]

    def hessian(x):
        g = eval_smooth_power(beta, x, 1)
        h = eval_smooth_power(beta, x, 2)
        return (delta * h + delta**2 * np.einsum("ni,nj->nij", g, g)) * value(x)[:, None, None]

    return TestFunction(value, gradient, hessian)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def build_example_operator(m: float, p: float, r: float, d: int = 1) -> CoefficientField:
    """Field of ``(1 + |x|_*^m) Laplacian - |x|_*^(p-1) x . grad - |x|_*^r``."""
    if not p > 1:
        raise ValueError(f"drift exponent p must satisfy p > 1, got p={p}")
    if m < 0 or r < 0:
        raise ValueError("exponents m and r must be nonnegative")

    def Q(s, x):
        a = 1.0 + eval_smooth_power(m, x, 0)
        return a[:, None, None] * np.eye(d)

    def dQ(s, x):
        g = eval_smooth_power(m, x, 1)
        return g[:, :, None, None] * np.eye(d)[None, None, :, :]

    def F(s, x):
        return -eval_smooth_power(p - 1.0, x, 0)[:, None] * x

    def V(s, x):
        return eval_smooth_power(r, x, 0)

    return CoefficientField(d, Q, dQ, F, V, eta=1.0,
                            family={"family": "example", "m": m, "p": p, "r": r})


def constant_field(d: int = 1, q: float = 1.0, drift=None, potential: float = 0.0,
                   eta: Optional[float] = None) -> CoefficientField:
    """Constant coefficients; ``q * I`` diffusion, constant drift and potential."""
    b = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    Q = lambda s, x: np.broadcast_to(q * np.eye(d), (len(x), d, d)).copy()
    dQ = lambda s, x: np.zeros((len(x), d, d, d))
    F = lambda s, x: np.broadcast_to(b, (len(x), d)).copy()
    V = lambda s, x: np.full(len(x), float(potential))
    fam = {"family": "constant", "q": q, "potential_value": float(potential)}
    return CoefficientField(d, Q, dQ, F, V, eta=q if eta is None else eta, family=fam)


def laplacian_field(d: int = 1) -> CoefficientField:
    return constant_field(d=d)


# ---------------------------------------------------------------------------
# application and checks
# ---------------------------------------------------------------------------

def apply_operator(field: CoefficientField, f: TestFunction, s: float, x,
                   variant: str = "full") -> np.ndarray:
    """Apply the operator to ``f`` at time ``s`` and points ``x``.

    ``variant``:
      ``"full"``        Tr(Q D^2 f) + F.grad f - V f
      ``"no_potential"`` the same without the potential term (A_0 = A + V)
      ``"comparison"``  eta Lap f + F.grad f - V f
      ``"comparison_no_potential"`` eta Lap f + F.grad f
    """
    pts = field.points(x)
    grad = np.asarray(f.gradient(pts))
    if grad.ndim != 2 or grad.shape[1] != field.d:
        raise ValueError(f"test function dimension does not match field dimension {field.d}")
    hess = np.asarray(f.hessian(pts))
    drift = np.einsum("ni,ni->n", field.F(s, pts), grad)
    if variant in ("full", "no_potential"):
        second = np.einsum("nij,nij->n", field.Q(s, pts), hess)
    elif variant in ("comparison", "comparison_no_potential"):
        second = field.eta * np.trace(hess, axis1=1, axis2=2)
    else:
        raise ValueError(f"unknown operator variant {variant!r}")
    out = second + drift
    if variant in ("full", "comparison"):
        out = out - field.V(s, pts) * f.value(pts)
    return out


@dataclass
class EllipticityReport:
    passed: bool
    min_margin: float
    margins: np.ndarray = field(repr=False)
    violations: list = field(default_factory=list)


def check_ellipticity(field: CoefficientField, samples, tol: float = 1e-10) -> EllipticityReport:
    """Smallest eigenvalue of ``Q`` minus ``eta`` at each sample.

    ``samples`` is a sequence of ``(s, x)`` pairs or a batch ``(s_array, points)``.
    """
    s_arr, pts = _sample_batch(field, samples)
    margins = np.empty(len(s_arr))
    for s in np.unique(s_arr):
        idx = np.nonzero(s_arr == s)[0]
        q = field.Q(float(s), pts[idx])
        margins[idx] = np.linalg.eigvalsh(0.5 * (q + np.swapaxes(q, 1, 2)))[:, 0] - field.eta
    bad = np.nonzero(margins < -tol)[0]
    viol = [(float(s_arr[i]), pts[i].tolist(), float(margins[i])) for i in bad]
    return EllipticityReport(not viol, float(margins.min()), margins, viol)


def _sample_batch(field: CoefficientField, samples):
    if (isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray)
            and isinstance(samples[1], np.ndarray) and samples[0].ndim == 1):
        s_arr = np.asarray(samples[0], dtype=float)
        pts = np.asarray(samples[1], dtype=float).reshape(len(s_arr), field.d)
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("need at least one sample point")
        s_arr = np.array([float(s) for s, _ in samples])
        pts = np.concatenate([field.points(x) for _, x in samples])
    if len(s_arr) == 0:
        raise ValueError("need at least one sample point")
    return s_arr, pts
