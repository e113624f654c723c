"""Quantitative kernel-bound machinery.

Moments of the kernel against ``|F|`` and ``V``, exponential weight systems
and their constants, the weighted-mass profile ``zeta_W``, the right-hand
sides of the weighted kernel estimates, and the fit of the final power-law
times Gaussian-type bound against a numerical kernel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .lyapunov import StaticCertificate, TimeDependentLyapunov, derive_h
from .operators import CoefficientField, build_example_operator, eval_smooth_power
from .solver import KernelSlice, quadrature_all_times

GAMMA_NAMES = ("c2", "c3", "c4", "c5", "c6", "c7")


# ---------------------------------------------------------------------------
# elementary inequalities
# ---------------------------------------------------------------------------

def envelope_bound(gamma, tau, beta):
    """``tau^(-gamma/beta) (gamma/beta)^(gamma/beta) e^(-gamma/beta)``.

    Upper bound for ``sup_{z > 0} z^gamma exp(-tau z^beta)`` (attained).
    """
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0) or np.any(tau <= 0):
        raise ValueError("tau and beta must be positive")
    q = gamma / beta
    with np.errstate(divide="ignore", invalid="ignore"):
        log_c = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)) - q, 0.0)
    out = np.exp(-q * np.log(tau) + log_c)
    return float(out) if out.ndim == 0 else out


def x_root_bound(ax: float, bx: float, cx: float, k: float) -> float:
    """Bound ``X <= B`` for ``X^k <= 4/3 ax^2 + 4/3 bx X^(k-1) + 4/3 cx X^(k-2)``, ``X >= 0``."""
    if not k > 2:
        raise ValueError(f"k must exceed 2, got {k}")
    if min(ax, bx, cx) < 0:
        raise ValueError("coefficients must be nonnegative")
    return 4.0 / 3.0 * bx + math.sqrt(4.0 / 3.0 * cx) + (4.0 / 3.0 * ax * ax) ** (1.0 / k)


def largest_root(ax: float, bx: float, cx: float, k: float, tol: float = 1e-13) -> float:
    """Largest nonnegative root of ``r^k - 4/3 bx r^(k-1) - 4/3 cx r^(k-2) - 4/3 ax^2`` by bisection."""
    f = lambda r: r**k - 4 / 3 * bx * r ** (k - 1) - 4 / 3 * cx * r ** (k - 2) - 4 / 3 * ax * ax
    hi = 1.0 + 4 / 3 * bx + math.sqrt(4 / 3 * cx) + (4 / 3 * ax * ax) ** (1 / k)
    while f(hi) < 0:
        hi *= 2.0
    if ax == 0 and bx == 0 and cx == 0:
        return 0.0
    lo = 0.0
    # f is negative on (0, root) and positive beyond it (single sign change)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return hi


# ---------------------------------------------------------------------------
# windows and weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeWindow:
    a0: float
    a: float
    b: float
    b0: float
    t: float = 1.0

    def __post_init__(self):
        if not (0 < self.a0 < self.a < self.b < self.b0 < self.t <= 1):
            raise ValueError("window must satisfy 0 < a0 < a < b < b0 < t <= 1, got "
                             f"({self.a0}, {self.a}, {self.b}, {self.b0}, t={self.t})")

    @classmethod
    def around(cls, s: float, t: float = 1.0) -> "TimeWindow":
        """``a0 = max(s - (t-s)/2, s/2)``, ``b0 = s + (t-s)/2`` with ``a, b`` at the quarter points."""
        a0 = max(s - (t - s) / 2, s / 2)
        b0 = s + (t - s) / 2
        return cls(a0, 0.5 * (a0 + s), 0.5 * (s + b0), b0, t)

    def mask(self, times) -> np.ndarray:
        times = np.asarray(times)
        return (times >= self.a0 - 1e-12) & (times <= self.b0 + 1e-12)


@dataclass(frozen=True)
class WeightSystem:
    """Weights ``w = exp(eps0 tau^alpha u)``, ``W_j = exp(eps_j tau^alpha u)``, ``u = |y|_*^beta``."""

    k: float
    eps: tuple
    delta: float
    alpha: float
    beta: float
    window: TimeWindow
    d: int = 1
    constants: dict = field(default_factory=dict)
    gammas: dict = field(default_factory=dict)
    cbar: dict = field(default_factory=dict)
    c0: float = 1.0
    sigma: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        e0, e1, e2 = self.eps
        if not self.k > self.d + 2:
            raise ValueError(f"k > d + 2 violated (k={self.k}, d={self.d})")
        if not 0 < e0 < e1 < e2 < self.delta:
            raise ValueError(f"0 < eps0 < eps1 < eps2 < delta violated ({self.eps}, delta={self.delta})")
        if self.sigma is None:
            object.__setattr__(self, "sigma", 0.5 * (1.0 - e2 / self.delta))
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")

    @property
    def t(self) -> float:
        return self.window.t

    def log_weight(self, j: int, s, pts) -> np.ndarray:
        """``log w`` for ``j = 0``, ``log W_j`` for ``j = 1, 2``."""
        tau = np.maximum(self.t - np.asarray(s, dtype=float), 0.0)
        return self.eps[j] * tau**self.alpha * eval_smooth_power(self.beta, pts, 0)

    def lyapunov(self, j: int, m: float, p: float, h: Optional[tuple] = None) -> TimeDependentLyapunov:
        """``W_j`` as a time dependent Lyapunov function with the rate derived for it."""
        coeff, e_h = h if h is not None else derive_h(self.eps[j], self.delta, self.alpha, self.beta,
                                                      m, p, self.d)
        return TimeDependentLyapunov(self.t, self.eps[j], self.alpha, self.beta, coeff, e_h,
                                     StaticCertificate(self.delta, self.beta))


def weight_exponents(m: float, p: float, r: float, alpha: float, beta: float) -> dict:
    """Exponents ``gamma_i`` with ``c_i = cbar_i (t - b0)^(-gamma_i)``."""
    pos = lambda v: max(v, 0.0)
    return {"c1": 0.0, "c2": alpha * pos(m - 1) / beta, "c3": alpha * pos(m - 2) / beta, "c4": 1.0,
            "c5": alpha * m / beta, "c6": alpha * p / beta, "c7": alpha * r / (2 * beta),
            "c8": 0.0, "c9": 0.0}


class WeightConstantError(ValueError):
    pass


def _verification_points(ws: WeightSystem, n_s: int, n_r: int):
    win = ws.window
    s = np.linspace(win.a0, win.b0, n_s)
    tau_min = ws.t - win.b0
    gap = min(ws.eps[1] - ws.eps[0], ws.eps[2] - ws.eps[0])
    Y = max(4.0, (80.0 * ws.k / (gap * tau_min**ws.alpha)) ** (1.0 / ws.beta))
    radii = np.unique(np.concatenate([np.linspace(0.0, 2.0, n_r // 4), np.geomspace(2.0, Y, n_r)]))
    if ws.d == 1:
        pts = np.concatenate([-radii[::-1], radii])[:, None]
    else:
        ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = (radii[:, None, None] * dirs[None]).reshape(-1, 2)
    return s, pts, Y


def weight_ratios(ws: WeightSystem, fld: CoefficientField, s: float, pts: np.ndarray) -> dict:
    """Left-hand sides of the weight conditions divided by their right-hand sides."""
    k = ws.k
    tau = ws.t - s
    u = eval_smooth_power(ws.beta, pts, 0)
    g = eval_smooth_power(ws.beta, pts, 1)
    H = eval_smooth_power(ws.beta, pts, 2)
    a0, a1 = ws.eps[0] * tau**ws.alpha, ws.eps[1] * tau**ws.alpha
    lw, l1, l2 = (ws.log_weight(j, s, pts) for j in range(3))
    e1 = np.exp((lw - l1) / k)
    e2 = np.exp((lw - l2) / k)
    Q = fld.Q(s, pts)
    hw = a0 * H + a0**2 * np.einsum("ni,nj->nij", g, g)  # D^2 w / w
    divq = np.einsum("niij->nj", fld.dQ(s, pts))
    qg = np.linalg.norm(np.einsum("nij,nj->ni", Q, g), axis=1)
    return {
        "c1": e1**2,
        "c2": a0 * qg * e1,
        "c3": np.abs(np.einsum("nij,nij->n", Q, hw)) * e1**2,
        "c4": ws.eps[0] * ws.alpha * tau ** (ws.alpha - 1.0) * u * e1**2,
        "c5": np.linalg.norm(divq, axis=1) * e2,
        "c6": np.linalg.norm(fld.F(s, pts), axis=1) * e2,
        "c7": np.sqrt(np.maximum(fld.V(s, pts), 0.0)) * e2,
        "c8": np.abs(np.trace(hw, axis1=1, axis2=2)) * e1**2,
        "c9": a1 * qg * e2,
    }


def compute_weight_constants(m: float, p: float, r: float, ws: WeightSystem,
                             fld: Optional[CoefficientField] = None, n_s: int = 33,
                             n_r: int = 400) -> WeightSystem:
    """Populate ``c1 .. c9`` from grid maxima of the weight-condition ratios.

    ``cbar_i = max(1, max_grid ratio_i (t-s)^gamma_i)`` and
    ``c_i = cbar_i (t - b0)^(-gamma_i)``; ``c1`` is ``max(1, max ratio_1)``.
    """
    fld = build_example_operator(m, p, r, ws.d) if fld is None else fld
    gammas = weight_exponents(m, p, r, ws.alpha, ws.beta)
    s_grid, pts, Y = _verification_points(ws, n_s, n_r)
    best = {name: (-np.inf, None) for name in gammas}
    order_ok = True
    order_margin = np.inf
    dsw = dyw = 0.0
    log_z = ws.delta * eval_smooth_power(ws.beta, pts, 0)
    for s in s_grid:
        tau = ws.t - s
        ratios = weight_ratios(ws, fld, s, pts)
        for name, vals in ratios.items():
            scaled = vals * tau ** gammas[name]
            if not np.all(np.isfinite(scaled)):
                raise WeightConstantError(f"{name}: non-finite ratio at s={s}")
            i = int(np.argmax(scaled))
            if scaled[i] > best[name][0]:
                best[name] = (float(scaled[i]), [float(s), *pts[i].tolist()], i)
        lw, l1, l2 = (ws.log_weight(j, s, pts) for j in range(3))
        cap = math.log(ws.c0) + (1.0 - ws.sigma) * log_z
        diffs = np.stack([l1 - lw, l2 - l1, cap - l2])
        order_margin = min(order_margin, float(diffs.min()))
        u = eval_smooth_power(ws.beta, pts, 0)
        gn = np.linalg.norm(eval_smooth_power(ws.beta, pts, 1), axis=1)
        inv_w = np.exp(-lw)
        dsw = max(dsw, float(np.max(ws.eps[0] * ws.alpha * tau ** (ws.alpha - 1) * u * inv_w)))
        dyw = max(dyw, float(np.max(ws.eps[0] * tau**ws.alpha * gn * inv_w)))
    order_ok = order_margin >= -1e-12
    cbar, consts, argmax = {}, {}, {}
    edge = len(pts) - 1 if ws.d == 1 else None
    for name, (val, where, idx) in best.items():
        if ws.d == 1 and idx in (0, edge) and val > 1.0:
            raise WeightConstantError(f"{name}: ratio still growing at |y| = {Y:.3g} (argmax {where})")
        cbar[name] = max(1.0, val)
        consts[name] = cbar[name] * (ws.t - ws.window.b0) ** (-gammas[name])
        argmax[name] = where
    diag = {"argmax": argmax, "raw_max": {n: v[0] for n, v in best.items()},
            "weight_order_margin": order_margin, "weight_order_ok": order_ok,
            "sup_w2_ds_w": dsw, "sup_w2_grad_w": dyw, "radius": Y, "n_points": len(pts) * n_s}
    return replace(ws, constants=consts, gammas=gammas, cbar=cbar, diagnostics=diag)


# ---------------------------------------------------------------------------
# kernel functionals
# ---------------------------------------------------------------------------

def _time_trapezoid(values: np.ndarray, times: np.ndarray) -> float:
    return float(np.trapezoid(values, times)) if len(times) > 1 else 0.0


def compute_gamma_moments(slc: KernelSlice, fld: CoefficientField, k: float,
                          window: TimeWindow) -> tuple[float, float]:
    """``(int int |F|^(k/2) g)^(2/k)`` and ``(int int V^(k/2) g)^(2/k)`` over ``[a0, b0] x box``."""
    grid = slc.grid
    sel = np.nonzero(window.mask(grid.times))[0]
    if len(sel) < 2:
        raise ValueError("window contains fewer than two slice times")
    nodes = grid.nodes()
    times = grid.times[sel]
    fvals, vvals = [], []
    w = slc.quadrature_weights().reshape(-1)
    for i in sel:
        s = float(grid.times[i])
        gvals = slc.values[i].reshape(-1)
        fvals.append(np.sum(np.linalg.norm(fld.F(s, nodes), axis=1) ** (k / 2) * gvals * w))
        vvals.append(np.sum(np.maximum(fld.V(s, nodes), 0.0) ** (k / 2) * gvals * w))
    g1 = _time_trapezoid(np.array(fvals), times) ** (2.0 / k)
    g2 = _time_trapezoid(np.array(vvals), times) ** (2.0 / k)
    if not (math.isfinite(g1) and math.isfinite(g2)):
        raise FloatingPointError("moment is not finite: truncation box too small for the coefficient growth")
    return g1, g2


@dataclass
class ZetaProfile:
    t: float
    x: np.ndarray
    times: np.ndarray
    values: np.ndarray
    window: Optional[TimeWindow] = None
    sup: float = float("nan")
    integral: float = float("nan")
    overflow: bool = False

    def to_rows(self):
        return [(float(s), float(v)) for s, v in zip(self.times, self.values)]


def compute_zeta(slc: KernelSlice, W: TimeDependentLyapunov,
                 window: Optional[TimeWindow] = None) -> ZetaProfile:
    """``zeta_W(s, x) = int W(s, y) g(t, s, x, y) dy`` at every slice time."""
    grid = slc.grid
    nodes = grid.nodes()
    logw = np.stack([W.log_value(s, nodes) for s in grid.times]).reshape(slc.values.shape)
    overflow = bool(np.any(logw[slc.values > 0] > 700.0))
    with np.errstate(over="ignore"):
        vals = quadrature_all_times(slc, np.exp(np.minimum(logw, 700.0)))
    prof = ZetaProfile(slc.t, slc.x, grid.times.copy(), vals, window, overflow=overflow)
    if window is not None:
        msk = window.mask(grid.times)
        prof.sup = float(vals[msk].max())
        prof.integral = _time_trapezoid(vals[msk], grid.times[msk])
    if overflow or not np.all(np.isfinite(vals)):
        prof.overflow = True
    return prof


@dataclass
class BoundReport:
    passed: bool
    worst_ratio: float
    argmax: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pass": self.passed, "worst_ratio": self.worst_ratio, "argmax": self.argmax,
                **self.details}


def _interval_h_integrals(W: TimeDependentLyapunov, times: np.ndarray) -> np.ndarray:
    """Exact ``int h`` over consecutive grid intervals."""
    tails = np.asarray(W.h_integral(times), dtype=float)  # int_{s_i}^t h
    return tails[:-1] - tails[1:]


def check_zeta_bound(profile: ZetaProfile, W: TimeDependentLyapunov, tol: float = 0.02,
                     phi_slack: float = 1e-6) -> BoundReport:
    """``zeta_W(s) <= exp(int_s^t h) W(t, x)`` and monotonicity of ``Phi``.

    ``Phi(tau) = (zeta(t) + int_tau^t h zeta) exp(int_{s0}^tau h)`` on the
    profile's time grid; ``int h zeta`` uses exact interval integrals of ``h``
    against the piecewise-linear interpolant midpoint value of ``zeta``.
    """
    times = profile.times
    x = np.atleast_1d(profile.x).reshape(1, -1)
    wt = float(W.value(W.t, x)[0])
    tail = np.asarray(W.h_integral(times), dtype=float)
    ratio = profile.values / (np.exp(tail) * wt)
    i = int(np.argmax(ratio))
    hint = _interval_h_integrals(W, times)
    zmid = 0.5 * (profile.values[:-1] + profile.values[1:])
    hz = hint * zmid
    tail_hz = np.concatenate([np.cumsum(hz[::-1])[::-1], [0.0]])  # int_{tau_j}^t h zeta
    zeta_t = profile.values[-1]
    head = tail[0] - tail  # int_{s0}^{tau_j} h
    phi = (zeta_t + tail_hz) * np.exp(head)
    steps = np.diff(phi)
    scale = max(1.0, float(np.max(np.abs(phi))))
    phi_ok = bool(np.all(steps >= -phi_slack * scale))
    passed = bool(ratio[i] <= 1.0 + tol) and phi_ok and not profile.overflow
    return BoundReport(passed, float(ratio[i]), float(times[i]),
                       {"phi_monotone": phi_ok, "phi_min_step": float(steps.min()),
                        "tol": tol, "overflow": profile.overflow})


def check_mass_bound(slc: KernelSlice, cert: StaticCertificate, M: float,
                     tol: float = 0.02) -> BoundReport:
    """``int Z g(t, s, x, .) <= Z(x) + M (t - s)`` at every slice time."""
    if not math.isfinite(M):
        raise ValueError("M must be finite (the certificate found no bound)")
    grid = slc.grid
    nodes = grid.nodes()
    logz = cert.log_value(nodes).reshape(grid.shape)
    overflow = bool(np.any(logz[np.any(slc.values > 0, axis=0)] > 700.0))
    lhs = quadrature_all_times(slc, np.exp(np.minimum(logz, 700.0))[None])
    zx = float(cert.value(np.atleast_1d(slc.x).reshape(1, -1))[0])
    rhs = zx + M * (slc.t - grid.times)
    ratio = lhs / rhs
    i = int(np.argmax(ratio))
    return BoundReport(bool(ratio[i] <= 1.0 + tol) and not overflow, float(ratio[i]),
                       float(grid.times[i]), {"M": M, "Zx": zx, "overflow": overflow})


# ---------------------------------------------------------------------------
# weighted kernel estimates
# ---------------------------------------------------------------------------

def main_bound_groups(c: dict, k: float, gap: float, variant: str = "thm34") -> tuple:
    """Coefficients of ``sup zeta_1``, ``int zeta_1`` and ``int zeta_2``.

    ``gap`` is ``b0 - b``. ``variant="thm45"`` adds ``c8^(k/2)`` and ``c9^k``.
    """
    h = k / 2.0
    g0 = c["c1"] ** h
    g1 = c["c1"] ** h / gap**h + c["c2"] ** k + c["c3"] ** h + c["c4"] ** h
    g2 = (c["c2"] * c["c6"]) ** h + c["c5"] ** k + c["c6"] ** k + c["c7"] ** k
    if variant == "thm45":
        g1 = g1 + c["c8"] ** h
        g2 = g2 + c["c9"] ** k
    elif variant != "thm34":
        raise ValueError(f"unknown variant {variant!r}")
    return g0, g1, g2


def assemble_main_bound(ws: WeightSystem, sup_zeta1: float, int_zeta1: float, int_zeta2: float,
                        variant: str = "thm34", constants: Optional[dict] = None) -> float:
    """Right-hand side of the weighted kernel estimate in units of the constant ``C1``."""
    c = ws.constants if constants is None else constants
    missing = [n for n in ("c1", "c2", "c3", "c4", "c5", "c6", "c7") if n not in c]
    if missing:
        raise ValueError(f"weight constants missing: {missing}")
    g0, g1, g2 = main_bound_groups(c, ws.k, ws.window.b0 - ws.window.b, variant)
    return g0 * sup_zeta1 + g1 * int_zeta1 + g2 * int_zeta2


# ---------------------------------------------------------------------------
# final bound shape
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeSpec:
    regime: int
    beta: float
    alpha0: float
    eps_max: float
    Lambda: float
    m: float
    p: float
    r: float

    def exponent(self, alpha: float, k: float) -> float:
        """Power of ``t - s`` in front of the Gaussian-type factor."""
        m, p, r = self.m, self.p, self.r
        if self.regime == 1:
            return 1.0 - alpha * max(m, p) * k / (p + 1.0 - m)
        return 1.0 - alpha * max(2 * m, 2 * p, r) * k / (r + 2.0 - m)

    def formula(self) -> str:
        if self.regime == 1:
            return "1 - alpha*max(m,p)*k/(p+1-m)"
        return "1 - alpha*max(2m,2p,r)*k/(r+2-m)"


def select_regime(m: float, p: float, r: float, force: Optional[int] = None) -> RegimeSpec:
    """Regime 1 when ``p >= (m + r)/2`` (drift dominates), else regime 2.

    ``force`` overrides the choice (used for negative controls).
    """
    if not p > 1:
        raise ValueError(f"p > 1 violated (p={p})")
    if not p > m - 1:
        raise ValueError(f"p > m - 1 violated (p={p}, m={m})")
    if not r > m - 2:
        raise ValueError(f"r > m - 2 violated (r={r}, m={m})")
    regime = (1 if p >= 0.5 * (m + r) else 2) if force is None else int(force)
    lam = max(m, p, r / 2.0)
    if regime == 1:
        beta = p + 1.0 - m
        return RegimeSpec(1, beta, beta / (p - 1.0), 1.0 / beta, lam, m, p, r)
    if regime != 2:
        raise ValueError(f"regime must be 1 or 2, got {regime}")
    beta = 0.5 * (r + 2.0 - m)
    a0 = (r - m + 2.0) / (r + m - 2.0) if r + m > 2 else (r + 2.0 - m) / (2.0 * (p - 1.0))
    return RegimeSpec(2, beta, a0, 2.0 / (r + 2.0 - m), lam, m, p, r)


@dataclass
class BoundVerdict:
    regime: int
    beta: float
    Lambda: float
    alpha: float
    eps: float
    k: float
    exponent: float
    C_fit: float
    C_fit_refined: Optional[float]
    stable: Optional[bool]
    passed: bool
    argmax: list
    margins: dict
    change: Optional[float] = None

    def to_dict(self) -> dict:
        return {"regime": self.regime, "beta": self.beta, "Lambda": self.Lambda, "alpha": self.alpha,
                "eps": self.eps, "k": self.k, "exponent": self.exponent, "C_fit": self.C_fit,
                "C_fit_refined": self.C_fit_refined, "stable": self.stable, "pass": self.passed,
                "change": self.change, "argmax": self.argmax, "margins": self.margins}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def bound_log_margin(slc: KernelSlice, spec: RegimeSpec, alpha: float, eps: float, k: float,
                     s_range: Optional[tuple] = None):
    """``log g + eps tau^alpha |y|_*^beta - E log tau`` on the window (``-inf`` where ``g = 0``).

    Returns ``(times, values)`` with ``values`` shaped like the selected slice rows.
    """
    grid = slc.grid
    lo, hi = s_range if s_range is not None else (grid.s_min, grid.t - 0.1 * (grid.t - grid.s_min))
    sel = (grid.times >= lo - 1e-12) & (grid.times <= hi + 1e-12) & (grid.times < grid.t)
    times = grid.times[sel]
    tau = slc.t - times
    u = eval_smooth_power(spec.beta, grid.nodes(), 0).reshape(grid.shape)
    E = spec.exponent(alpha, k)
    g = slc.values[sel]
    with np.errstate(divide="ignore"):
        lg = np.log(g)
    shape = (-1,) + (1,) * grid.d
    vals = lg + eps * tau.reshape(shape) ** alpha * u[None] - E * np.log(tau).reshape(shape)
    return times, vals


def _fit(slc, spec, alpha, eps, k, s_range):
    times, vals = bound_log_margin(slc, spec, alpha, eps, k, s_range)
    if np.any(np.isnan(vals)) or np.any(vals == np.inf):
        raise FloatingPointError("bound fit overflow: truncation box inadequate")
    flat = int(np.argmax(vals))
    idx = np.unravel_index(flat, vals.shape)
    logc = float(vals[idx])
    y = slc.grid.axis[list(idx[1:])].tolist()
    finite = vals[np.isfinite(vals)]
    # margins are log C_fit minus the pointwise quantity: 0 at the argmax
    return logc, [float(times[idx[0]]), *y], float(logc - finite.max()), float(logc - finite.min())


def verify_theorem_bound(slc: KernelSlice, spec: RegimeSpec, alpha: float, eps: float, k: float,
                         refined: Optional[KernelSlice] = None, s_range: Optional[tuple] = None,
                         stability: float = 0.25, check_parameters: bool = True) -> BoundVerdict:
    """Fit ``C`` in ``g <= C tau^E exp(-eps tau^alpha |y|_*^beta)`` and test its stability.

    ``C_fit`` is the maximum over the window of ``g tau^(-E) exp(eps tau^alpha |y|_*^beta)``;
    with a ``refined`` slice the verdict passes iff both fits are finite and
    differ by at most ``stability`` (relative).
    """
    if check_parameters:
        if not alpha > spec.alpha0:
            raise ValueError(f"alpha > alpha_0 violated (alpha={alpha}, alpha_0={spec.alpha0})")
        if not 0 < eps < spec.eps_max:
            raise ValueError(f"0 < eps < eps_max violated (eps={eps}, eps_max={spec.eps_max})")
    if not k > slc.grid.d + 2:
        raise ValueError(f"k > d + 2 violated (k={k})")
    logc, where, mmin, mmax = _fit(slc, spec, alpha, eps, k, s_range)
    C = math.exp(logc) if logc < 700 else math.inf
    C_ref = stable = change = None
    if refined is not None:
        logr, _, _, _ = _fit(refined, spec, alpha, eps, k, s_range)
        C_ref = math.exp(logr) if logr < 700 else math.inf
        change = abs(math.exp(logr - logc) - 1.0) if math.isfinite(C) else math.inf
        stable = bool(change <= stability)
    passed = math.isfinite(C) and C > 0 and (stable is None or stable)
    return BoundVerdict(spec.regime, spec.beta, spec.Lambda, alpha, eps, k, spec.exponent(alpha, k),
                        C, C_ref, stable, bool(passed), where,
                        {"min": mmin, "max": mmax if math.isfinite(mmax) else None}, change)


def bound_sweep(solve: Callable[[int], KernelSlice], spec: RegimeSpec,
                params: Iterable[tuple], path=None, refine: int = 2) -> list[dict]:
    """Verdicts over ``(alpha, eps, k)`` triples; ``solve(factor)`` returns a slice at refinement ``factor``.

    Writes CSV ``alpha,eps,k,C_fit,stable`` when ``path`` is given.
    """
    base, fine = solve(1), solve(refine)
    rows = []
    for alpha, eps, k in params:
        v = verify_theorem_bound(base, spec, alpha, eps, k, refined=fine)
        rows.append({"alpha": alpha, "eps": eps, "k": k, "C_fit": v.C_fit, "stable": v.stable})
    if path is not None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["alpha", "eps", "k", "C_fit", "stable"])
            wr.writeheader()
            wr.writerows(rows)
    return rows
