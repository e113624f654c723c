"""Bounded-diffusion approximations of an operator.

The diffusion matrix is blended to ``eta I`` outside a sublevel set of a
time dependent Lyapunov function ``W1``:

    q^(n) = phi(W1 / n) q + (1 - phi(W1 / n)) eta I,

with a cutoff ``phi`` that equals 1 on ``(-1, 1)``, vanishes off ``(-2, 2)``
and satisfies ``|t phi'(t)| <= 2``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .lyapunov import TimeDependentLyapunov
from .operators import CoefficientField, eval_smooth_power
from .solver import KernelSlice, SolverConfig, SpaceTimeGrid, solve_kernel_slice

N_SAMPLES = 10_000


@dataclass(frozen=True)
class CutoffProfile:
    """Even cutoff ``phi`` with a mollified logarithmic ramp on ``[1, 2]``."""

    mu: float
    spline: CubicHermiteSpline
    max_t_dphi: float

    def __call__(self, t) -> np.ndarray:
        a = np.abs(np.asarray(t, dtype=float))
        out = np.where(a <= 1.0, 1.0, np.where(a >= 2.0, 0.0, self.spline(np.clip(a, 1.0, 2.0))))
        return np.clip(out, 0.0, 1.0)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = np.abs(t)
        inner = (a > 1.0) & (a < 2.0)
        d = np.where(inner, self.spline(np.clip(a, 1.0, 2.0), 1), 0.0)
        return np.sign(t) * d

    def t_derivative(self, t) -> np.ndarray:
        """``t phi'(t)``."""
        t = np.asarray(t, dtype=float)
        return t * self.derivative(t)

    def dump(self, path, n: int = 1001) -> Path:
        """CSV ``t,phi,tphi_prime`` on ``[0, 2.5]``."""
        path = Path(path)
        t = np.linspace(0.0, 2.5, n)
        rows = np.column_stack([t, self(t), self.t_derivative(t)])
        np.savetxt(path, rows, delimiter=",", header="t,phi,tphi_prime", comments="", fmt="%.17g")
        return path


def _ramp(t: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Log ramp from 1 at ``1 + mu`` to 0 at ``2 - mu`` and its derivative."""
    lo, hi = 1.0 + mu, 2.0 - mu
    scale = 1.0 / math.log(hi / lo)
    inside = (t > lo) & (t < hi)
    safe = np.where(inside, t, 1.0)
    val = np.where(t <= lo, 1.0, np.where(t >= hi, 0.0, np.log(hi / safe) * scale))
    der = np.where(inside, -scale / safe, 0.0)
    return val, der


def build_cutoff_profile(mu: float = 0.05, n: int = N_SAMPLES) -> CutoffProfile:
    """Mollify the log ramp with a compact bump of radius ``mu`` and interpolate cubically.

    Raises ``ValueError`` if the measured ``max |t phi'(t)|`` exceeds 2.
    """
    if not 0 < mu < 0.2:
        raise ValueError(f"mollification width must lie in (0, 0.2), got {mu}")
    t = np.linspace(1.0 - 2 * mu, 2.0 + 2 * mu, n)
    h = t[1] - t[0]
    half = int(math.ceil(mu / h))
    z = np.arange(-half, half + 1) * h / mu
    bump = np.where(np.abs(z) < 1, np.exp(-1.0 / np.maximum(1.0 - z * z, 1e-300)), 0.0)
    bump /= bump.sum()
    val, der = _ramp(t, mu)
    pad = lambda a, left, right: np.concatenate([np.full(half, left), a, np.full(half, right)])
    phi = np.convolve(pad(val, 1.0, 0.0), bump, mode="valid")
    dphi = np.convolve(pad(der, 0.0, 0.0), bump, mode="valid")
    spline = CubicHermiteSpline(t, phi, dphi)
    grid = np.linspace(0.0, 2.5, n)
    prof = CutoffProfile(mu, spline, 0.0)
    measured = float(np.max(np.abs(prof.t_derivative(grid))))
    if measured > 2.0:
        raise ValueError(f"|t phi'(t)| reaches {measured:.4f} > 2 for mu={mu}")
    return CutoffProfile(mu, spline, measured)


@dataclass(frozen=True)
class TruncatedOperator:
    base: CoefficientField
    n: float
    W1: TimeDependentLyapunov
    cutoff: CutoffProfile
    field: CoefficientField

    def phi_n(self, s: float, x) -> np.ndarray:
        pts = self.base.points(x)
        return self.cutoff(_scaled_weight(self.W1, self.n, s, pts))


def _scaled_weight(W1: TimeDependentLyapunov, n: float, s: float, pts: np.ndarray) -> np.ndarray:
    """``W1 / n``, capped at ``e^3`` (the cutoff vanishes beyond 2 anyway)."""
    return np.exp(np.minimum(W1.log_value(s, pts) - math.log(n), 3.0))


def build_truncated_operator(fld: CoefficientField, n: float, W1: TimeDependentLyapunov,
                             cutoff: Optional[CutoffProfile] = None) -> TruncatedOperator:
    """Operator with diffusion ``phi_n q + (1 - phi_n) eta I``; drift and potential unchanged."""
    if not n >= 1:
        raise ValueError(f"level n must be >= 1, got {n}")
    cutoff = build_cutoff_profile() if cutoff is None else cutoff
    d, eta = fld.d, fld.eta
    eye = np.eye(d)

    def Q(s, x):
        z = _scaled_weight(W1, n, s, x)
        ph = cutoff(z)[:, None, None]
        return ph * fld.Q(s, x) + (1.0 - ph) * eta * eye

    def dQ(s, x):
        z = _scaled_weight(W1, n, s, x)
        ph = cutoff(z)
        # d_k phi(W1/n) = phi'(z) z a d_k u with a = eps (t-s)^alpha
        a = W1.coefficient(s)
        grad_phi = (cutoff.t_derivative(z) * a)[:, None] * eval_smooth_power(W1.beta, x, 1)
        diff = fld.Q(s, x) - eta * eye
        return (ph[:, None, None, None] * fld.dQ(s, x)
                + grad_phi[:, :, None, None] * diff[:, None, :, :])

    fam = {"family": "truncated", "level": n,
           "base": None if fld.family is None else dict(fld.family)}
    out = CoefficientField(d, Q, dQ, fld.F, fld.V, eta, fld.holder, fam, time_dependent=True)
    return TruncatedOperator(fld, n, W1, cutoff, out)


def remap_constants(c2: float, c3: float, c5: float, c8: float, c9: float,
                    eta: float) -> tuple[float, float, float]:
    """Constants of the truncated operators: ``(2 c2, c3 + eta c8, c5 + 4 c9)``."""
    if min(c2, c3, c5, c8, c9) < 1:
        raise ValueError("weight constants must be >= 1")
    if not eta > 0:
        raise ValueError("eta must be positive")
    return 2.0 * c2, c3 + eta * c8, c5 + 4.0 * c9


def remapped_constant_table(constants: dict, eta: float) -> dict:
    """Full ``c1 .. c9`` table with ``c2, c3, c5`` remapped and the rest unchanged."""
    c = dict(constants)
    c["c2"], c["c3"], c["c5"] = remap_constants(c["c2"], c["c3"], c["c5"], c["c8"], c["c9"], eta)
    return c


@dataclass
class SweepRow:
    n: float
    sup_diff: float
    rel_diff: float
    mass_defect: float


def _compact_mask(grid: SpaceTimeGrid, radius: float) -> np.ndarray:
    return (np.linalg.norm(grid.nodes(), axis=1) <= radius + 1e-12).reshape(grid.shape)


def convergence_sweep(fld: CoefficientField, levels: Sequence[float], W1: TimeDependentLyapunov,
                      t: float, x, cfg: SolverConfig, grid: SpaceTimeGrid, a0: float, b0: float,
                      K_radius: Optional[float] = None, cutoff: Optional[CutoffProfile] = None,
                      path=None, workers: int = 1, reference: Optional[KernelSlice] = None):
    """``sup_K |g_n - g|`` for each level on ``K x [a0 + 0.1 (t - a0), b0]``.

    ``K`` defaults to ``B(0, R/2)``. ``mass_defect`` is ``max_s |mass_n(s) - mass(s)|``.
    Returns ``(rows, reference_slice)``; writes CSV ``n,sup_diff,mass_defect`` when
    ``path`` is given.
    """
    levels = [float(n) for n in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    cutoff = build_cutoff_profile() if cutoff is None else cutoff
    K_radius = 0.5 * grid.R if K_radius is None else K_radius
    lo, hi = a0 + 0.1 * (t - a0), b0
    times = grid.times
    tsel = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    kmask = _compact_mask(grid, K_radius)
    kpts = grid.nodes()[kmask.reshape(-1)]
    worst = max(float(np.max(W1.log_value(s, kpts))) for s in times[tsel])
    if worst > math.log(levels[0]) + 1e-12:
        raise ValueError(f"{{W1 <= {levels[0]:g}}} does not contain K = B(0, {K_radius:g}) on the window")
    ops = [build_truncated_operator(fld, n, W1, cutoff) for n in levels]

    def solve(f):
        return solve_kernel_slice(f, t, x, cfg, grid)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        ref_future = None if reference is not None else pool.submit(solve, fld)
        slices = list(pool.map(solve, [op.field for op in ops]))
        ref = reference if reference is not None else ref_future.result()
    ref_vals = ref.values[tsel][:, kmask]
    scale = float(np.max(np.abs(ref_vals)))
    ref_mass = ref.mass()
    rows = []
    for n, sl in zip(levels, slices):
        diff = float(np.max(np.abs(sl.values[tsel][:, kmask] - ref_vals)))
        rows.append(SweepRow(n, diff, diff / scale if scale > 0 else math.inf,
                             float(np.max(np.abs(sl.mass() - ref_mass)))))
    if path is not None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["n", "sup_diff", "mass_defect"])
            for row in rows:
                wr.writerow([repr(row.n), repr(row.sup_diff), repr(row.mass_defect)])
    return rows, ref
