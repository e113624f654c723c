"""Static and time dependent Lyapunov functions of exponential type.

Static certificates are ``Z(x) = exp(delta |x|_*^beta)`` with a bound ``M``
such that ``A Z <= M`` and ``eta Lap Z + F.grad Z - V Z <= M`` everywhere.
Time dependent ones are ``W(s, x) = exp(eps (t-s)^alpha |x|_*^beta)`` with a
power-law rate ``h(s) = C (t-s)^e`` such that

    d_s W - A(s) W >= -h(s) W.

All generator evaluations go through ``(A W) / W``, which is a polynomial-type
expression in ``x`` and never overflows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .operators import CoefficientField, TestFunction, eval_smooth_power, exp_smooth_power

VARIANTS = {"A": ("full", "comparison"), "A0": ("no_potential", "comparison_no_potential")}


# ---------------------------------------------------------------------------
# reports and sampling
# ---------------------------------------------------------------------------

@dataclass
class CertificateReport:
    passed: bool
    worst_margin: float
    argmin: list
    n_samples: int
    notes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pass": bool(self.passed),
            "worst_margin": float(self.worst_margin),
            "argmin": [float(v) for v in self.argmin],
            "n_samples": int(self.n_samples),
            "notes": list(self.notes),
            **({"details": _jsonable(self.details)} if self.details else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def merge_reports(reports: list[CertificateReport]) -> CertificateReport:
    """Min-margin reduction of reports computed on disjoint sample sets."""
    worst = min(reports, key=lambda r: r.worst_margin)
    notes = [n for r in reports for n in r.notes]
    return CertificateReport(all(r.passed for r in reports), worst.worst_margin, worst.argmin,
                             sum(r.n_samples for r in reports), notes)


def sample_points(d: int, radius: float, times, n_axis: int = 129, n_random: int = 1000,
                  seed: int = 0, t_range: Optional[tuple[float, float]] = None):
    """Tensor grid ``times x [-radius, radius]^d`` plus uniform random points.

    Returns ``(s, pts)`` with ``s`` of shape ``(n,)`` and ``pts`` of shape ``(n, d)``.
    """
    times = np.asarray(times, dtype=float)
    axis = np.linspace(-radius, radius, n_axis)
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    s = np.repeat(times, len(mesh))
    pts = np.tile(mesh, (len(times), 1))
    if n_random:
        rng = np.random.default_rng(seed)
        lo, hi = t_range if t_range is not None else (times.min(), times.max())
        s = np.concatenate([s, rng.uniform(lo, hi, n_random)])
        pts = np.concatenate([pts, rng.uniform(-radius, radius, (n_random, d))])
    return s, pts


# ---------------------------------------------------------------------------
# exponential family algebra
# ---------------------------------------------------------------------------

def _exp_family_ratio(field: CoefficientField, s: np.ndarray, pts: np.ndarray, a: np.ndarray,
                      beta: float, variant: str) -> np.ndarray:
    """``(L Z) / Z`` for ``Z = exp(a |x|_*^beta)`` with ``a`` per sample."""
    grad_u = eval_smooth_power(beta, pts, 1)
    hess_u = eval_smooth_power(beta, pts, 2)
    out = np.empty(len(pts))
    for t_val in np.unique(s):
        idx = np.nonzero(s == t_val)[0]
        g, h, av = grad_u[idx], hess_u[idx], a[idx]
        x = pts[idx]
        hz = av[:, None, None] * h + (av**2)[:, None, None] * np.einsum("ni,nj->nij", g, g)
        if variant in ("full", "no_potential"):
            second = np.einsum("nij,nij->n", field.Q(t_val, x), hz)
        else:
            second = field.eta * np.trace(hz, axis1=1, axis2=2)
        val = second + av * np.einsum("ni,ni->n", field.F(t_val, x), g)
        if variant in ("full", "comparison"):
            val = val - field.V(t_val, x)
        out[idx] = val
    return out


@dataclass(frozen=True)
class StaticCertificate:
    """``Z = exp(delta |x|_*^beta)`` certifying ``A`` (target ``"A"``) or ``A_0`` (``"A0"``)."""

    delta: float
    beta: float
    M: Optional[float] = None
    target: str = "A"

    def __post_init__(self):
        if not (self.delta > 0 and self.beta > 0):
            raise ValueError("delta and beta must be positive")
        if self.target not in VARIANTS:
            raise ValueError(f"target must be 'A' or 'A0', got {self.target!r}")

    @property
    def Z(self) -> TestFunction:
        return exp_smooth_power(self.delta, self.beta)

    def value(self, pts) -> np.ndarray:
        return np.exp(self.delta * eval_smooth_power(self.beta, np.asarray(pts, dtype=float), 0))

    def log_value(self, pts) -> np.ndarray:
        return self.delta * eval_smooth_power(self.beta, np.asarray(pts, dtype=float), 0)

    def generator_ratio(self, field: CoefficientField, s, pts, variant: str) -> np.ndarray:
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(pts),))
        a = np.full(len(pts), self.delta)
        return _exp_family_ratio(field, s, pts, a, self.beta, variant)


def leading_terms(field: CoefficientField, delta: float, beta: float, variant: str) -> dict:
    """Power expansion of ``(L Z)/Z`` for the example family at ``|x| >= 1``.

    Returns ``{power: coefficient}`` with equal powers merged.
    """
    fam = field.family or {}
    m, p, r = float(fam["m"]), float(fam["p"]), float(fam["r"])
    d = field.d
    terms: dict[float, float] = {}

    def add(power, coef):
        for key in terms:
            if abs(key - power) < 1e-12:
                terms[key] += coef
                return
        terms[power] = coef

    inner = [(beta - 2.0, delta * beta * (d + beta - 2.0)), (2.0 * beta - 2.0, (delta * beta) ** 2)]
    if variant in ("full", "no_potential"):
        for pw, c in inner:
            add(pw, c)
            add(pw + m, c)  # (1 + |x|^m) factor; m = 0 doubles the term
    else:
        for pw, c in inner:
            add(pw, field.eta * c)
    add(p - 1.0 + beta, -delta * beta)
    if variant in ("full", "comparison") and fam.get("potential") is None:
        add(r, -1.0)
    return {k: v for k, v in terms.items() if abs(v) > 1e-14}


def asymptotic_sign_check(field: CoefficientField, cert: StaticCertificate,
                          probe_radius: float = 2.0) -> dict:
    """Decide whether ``L Z -> -infinity`` as ``|x| -> infinity``.

    Exact leading-coefficient analysis for the example family; otherwise ratio
    probes along rays at geometrically growing radii.
    """
    out = {}
    fam = field.family or {}
    for variant in VARIANTS[cert.target]:
        if fam.get("family") == "example" and fam.get("potential") in (None, "zeroed"):
            terms = leading_terms(field, cert.delta, cert.beta, variant)
            lead = max(terms)
            out[variant] = {"method": "leading_coefficient", "leading_power": lead,
                            "leading_coefficient": terms[lead], "passed": terms[lead] < 0}
        else:
            out[variant] = _ray_probe(field, cert, variant, probe_radius)
    out["passed"] = all(v["passed"] for v in out.values() if isinstance(v, dict))
    return out


def _ray_probe(field, cert, variant, probe_radius, levels: int = 6) -> dict:
    d = field.d
    dirs = [np.eye(d)[i] * sgn for i in range(d) for sgn in (1.0, -1.0)]
    if d > 1:
        dirs += [v / np.linalg.norm(v) for v in np.array(np.meshgrid(*([[-1.0, 1.0]] * d))).T.reshape(-1, d)]
    radii = max(probe_radius, 2.0) * 2.0 ** np.arange(levels)
    ok = True
    worst = -np.inf
    for s in (0.0, 0.5, 1.0):
        for v in dirs:
            pts = radii[:, None] * v[None, :]
            rat = cert.generator_ratio(field, s, pts, variant)
            tail = rat[-3:]
            worst = max(worst, float(tail[-1]))
            if not (np.all(tail < 0) and np.all(np.diff(tail) < 0)):
                ok = False
    return {"method": "ray_probe", "largest_tail_ratio": worst, "passed": ok}


def check_static_certificate(field: CoefficientField, cert: StaticCertificate, samples,
                             tol: float = 0.0) -> CertificateReport:
    """Check ``L Z <= M`` for both operators of the certificate's target.

    ``samples`` is ``(s, pts)``. When ``cert.M`` is ``None`` the smallest
    admissible ``M`` on the samples is reported in ``details["M"]``; the margin
    is then measured against that value.
    """
    s, pts = samples
    pts = np.asarray(pts, dtype=float).reshape(len(s), field.d)
    logz = cert.log_value(pts)
    notes = []
    lz = {}
    for variant in VARIANTS[cert.target]:
        ratio = cert.generator_ratio(field, s, pts, variant)
        with np.errstate(over="ignore"):
            # sign(ratio) * exp(log|ratio| + log Z): overflow goes to +-inf, never nan
            lz[variant] = np.where(ratio == 0, 0.0, np.sign(ratio) * np.exp(
                np.minimum(np.log(np.abs(ratio) + 1e-300) + logz, 1e4)))
    stacked = np.maximum(*lz.values())
    finite = bool(np.all(stacked < np.inf))
    if not finite:
        notes.append("L Z is not finite (overflow) on the sample set")
    M_found = float(max(0.0, np.max(stacked)))
    M = M_found if cert.M is None else float(cert.M)
    if math.isinf(M) or not finite:
        i = int(np.argmax(stacked))
        worst = -math.inf
    else:
        margins = M - stacked
        i = int(np.argmin(margins))
        worst = float(margins[i])
    growth = _radial_growth(cert, field.d)
    if not growth:
        notes.append("Z does not grow radially beyond |x| = 1")
    asym = asymptotic_sign_check(field, cert, probe_radius=float(np.max(np.abs(pts))))
    if not asym["passed"]:
        notes.append("negative leading coefficient violated: L Z is not bounded above")
    passed = finite and growth and asym["passed"] and worst >= -tol
    return CertificateReport(passed, worst, [float(s[i]), *pts[i].tolist()], len(s),
                             notes, {"M": M_found if cert.M is None else M,
                                     "M_found": M_found, "asymptotic": asym})


def _radial_growth(cert: StaticCertificate, d: int) -> bool:
    r = np.linspace(1.0, 50.0, 200)
    pts = np.zeros((len(r), d))
    pts[:, 0] = r
    lz = cert.log_value(pts)
    return bool(np.all(np.diff(lz) > 0))


# ---------------------------------------------------------------------------
# time dependent Lyapunov functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeDependentLyapunov:
    """``W(s, x) = exp(eps (t-s)^alpha |x|_*^beta)`` with rate ``h = C (t-s)^e``."""

    t: float
    eps: float
    alpha: float
    beta: float
    h_coeff: float = 0.0
    h_exp: float = 0.0
    dominating: Optional[StaticCertificate] = None
    case: Optional[str] = None

    def with_rate(self, coeff: float, exponent: Optional[float] = None) -> "TimeDependentLyapunov":
        return replace(self, h_coeff=coeff, h_exp=self.h_exp if exponent is None else exponent)

    def _tau(self, s):
        return np.maximum(self.t - np.asarray(s, dtype=float), 0.0)

    def coefficient(self, s) -> np.ndarray:
        """``eps (t-s)^alpha``."""
        return self.eps * self._tau(s) ** self.alpha

    def log_value(self, s, pts) -> np.ndarray:
        return self.coefficient(s) * eval_smooth_power(self.beta, np.asarray(pts, dtype=float), 0)

    def value(self, s, pts) -> np.ndarray:
        return np.exp(self.log_value(s, pts))

    def h(self, s) -> np.ndarray:
        tau = self._tau(s)
        with np.errstate(divide="ignore"):
            return self.h_coeff * tau**self.h_exp

    def h_integral(self, s0, s1=None) -> np.ndarray:
        """``int_{s0}^{s1} h`` (``s1`` defaults to ``t``)."""
        if self.h_coeff == 0:
            return np.zeros_like(np.asarray(s0, dtype=float))
        e1 = self.h_exp + 1.0
        if e1 <= 0:
            return np.full_like(np.asarray(s0, dtype=float), np.inf)
        upper = self._tau(s0) ** e1
        lower = 0.0 if s1 is None else self._tau(s1) ** e1
        return self.h_coeff * (upper - lower) / e1

    def ds_ratio(self, s, pts) -> np.ndarray:
        """``(d_s W) / W``."""
        tau = self._tau(s)
        u = eval_smooth_power(self.beta, pts, 0)
        if self.eps == 0:
            return np.zeros(len(pts))
        return -self.eps * self.alpha * tau ** (self.alpha - 1.0) * u

    def generator_ratio(self, field: CoefficientField, s, pts, variant: str = "full") -> np.ndarray:
        s = np.broadcast_to(np.asarray(s, dtype=float), (len(pts),))
        return _exp_family_ratio(field, s, pts, self.coefficient(s), self.beta, variant)


def alpha_threshold(m: float, p: float, r: float, case: str, beta: float) -> float:
    if case == "ii" and m + r <= 2:
        return beta / (p - 1.0)
    return beta / (m + beta - 2.0)


def derive_h(eps: float, delta: float, alpha: float, beta: float, m: float, p: float,
             d: int = 1) -> tuple[float, float]:
    """Coefficient and exponent of the rate ``h(s) = C (t-s)^e``.

    When ``m + beta - 2 > 0`` the cut radius is ``[(delta-eps) beta^2 / alpha]^(-1/(beta+m-2))``;
    otherwise it is ``[(alpha + 2 beta)/beta]^(1/(p-1))`` and the constant
    ``2 (d + beta - 2)_+`` is kept in the coefficient.
    """
    g = m + beta - 2.0
    if g > 0:
        e_h = alpha - 1.0 - beta / g
        c = ((delta - eps) * beta**2 / alpha) ** (-1.0 / g)
        coeff = (eps * alpha * c**beta
                 + 2.0 * eps * beta * c ** (m + beta - 2.0) * (d + beta - 2.0)
                 + 2.0 * eps**2 * beta**2 * c ** (m + 2.0 * beta - 2.0))
    else:
        e_h = alpha - 1.0 - beta / (p - 1.0)
        c = ((alpha + 2.0 * beta) / beta) ** (1.0 / (p - 1.0))
        coeff = eps * c**beta * (alpha + 2.0 * beta) + 2.0 * max(d + beta - 2.0, 0.0)
    return float(coeff), float(e_h)


def build_time_dependent_W(m: float, p: float, r: float, case: str, eps: float, delta: float,
                           alpha: float, t: float = 1.0, d: int = 1) -> TimeDependentLyapunov:
    """Time dependent Lyapunov function for the example operator with rate attached."""
    if case == "i":
        if not p > m - 1:
            raise ValueError(f"case (i) requires p > m - 1 (p={p}, m={m})")
        beta = p + 1.0 - m
    elif case == "ii":
        if not r > m - 2:
            raise ValueError(f"case (ii) requires r > m - 2 (r={r}, m={m})")
        beta = 0.5 * (r + 2.0 - m)
    else:
        raise ValueError(f"case must be 'i' or 'ii', got {case!r}")
    if not p > 1:
        raise ValueError(f"p > 1 violated (p={p})")
    if not 0 < t <= 1:
        raise ValueError(f"terminal time must lie in (0, 1], got {t}")
    if not 0 < eps:
        raise ValueError(f"0 < eps violated (eps={eps})")
    if not eps < delta:
        raise ValueError(f"eps < delta violated (eps={eps}, delta={delta})")
    if not delta < 1.0 / beta:
        raise ValueError(f"delta < 1/beta violated (delta={delta}, 1/beta={1.0 / beta})")
    a0 = alpha_threshold(m, p, r, case, beta)
    if not alpha > a0:
        raise ValueError(f"alpha > alpha_0 violated (alpha={alpha}, alpha_0={a0})")
    coeff, e_h = derive_h(eps, delta, alpha, beta, m, p, d)
    return TimeDependentLyapunov(t, eps, alpha, beta, coeff, e_h,
                                 StaticCertificate(delta, beta), case)


def default_time_samples(t: float, n: int = 64, frac: float = 0.9) -> np.ndarray:
    return np.linspace(0.0, frac * t, n)


def check_time_dependent(field: CoefficientField, W: TimeDependentLyapunov, samples,
                         tol: float = 1e-8) -> CertificateReport:
    """Check ``d_s W - L W + h W >= 0`` for ``L = A`` and ``L = eta Lap + F.grad - V``.

    The margin is the minimum of ``[d_s W - L W + h W] / W`` over the samples.
    """
    s, pts = samples
    s = np.asarray(s, dtype=float)
    pts = np.asarray(pts, dtype=float).reshape(len(s), field.d)
    if np.any(s >= W.t):
        raise ValueError("samples at s >= t are not allowed (the rate may blow up there)")
    base = W.ds_ratio(s, pts) + W.h(s)
    star = base - W.generator_ratio(field, s, pts, "full")
    star2 = base - W.generator_ratio(field, s, pts, "comparison")
    margins = np.minimum(star, star2)
    i = int(np.argmin(margins))
    notes = []
    if W.dominating is not None and not W.eps < W.dominating.delta:
        notes.append("eps >= delta: W is not dominated by Z")
    passed = bool(margins[i] >= -tol) and not notes
    return CertificateReport(passed, float(margins[i]), [float(s[i]), *pts[i].tolist()], len(s),
                             notes, {"star": float(star.min()), "star_star": float(star2.min())})


def check_domination(W: TimeDependentLyapunov, samples) -> CertificateReport:
    """``W <= Z^(eps/delta) <= Z`` in log form."""
    if W.dominating is None:
        raise ValueError("W has no dominating certificate")
    s, pts = samples
    pts = np.asarray(pts, dtype=float)
    lw = W.log_value(s, pts)
    lz = W.dominating.log_value(pts)
    ratio = W.eps / W.dominating.delta
    m1 = ratio * lz - lw
    m2 = lz - ratio * lz
    margins = np.minimum(m1, m2)
    i = int(np.argmin(margins))
    return CertificateReport(bool(margins[i] >= -1e-12), float(margins[i]),
                             [float(np.asarray(s)[i]), *pts[i].tolist()], len(pts))
