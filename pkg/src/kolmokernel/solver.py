"""Green-kernel slices via the adjoint (Fokker-Planck) equation.

For fixed ``(t, x)`` the slice ``u(s, y) = g(t, s, x, y)`` solves

    d_s u = -A*(s) u,   u(t, .) = delta_x,
    A* u = sum_ij D_ij(q_ij u) - div(F u) - V u,

backward in ``s``. We march ``tau = t - s`` forward from a normalised Gaussian
of width ``sigma_delta`` on the box ``[-R, R]^d`` with absorbing boundary. The
spatial operator is the conservative (flux) discretisation; its transpose is
the nondivergence discretisation used for the forward Cauchy problem, so
``<g(s), f>`` and the forward solution agree at the discrete level.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, bicgstab

from . import kernels
from .lyapunov import StaticCertificate
from .operators import CoefficientField, TestFunction, apply_operator


class PecletWarning(UserWarning):
    """Advection is under-resolved (cell Peclet number above threshold)."""


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grids and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimeGrid:
    d: int
    R: float
    n_nodes: int
    s_min: float
    t: float
    n_steps: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("only d = 1 and d = 2 are supported")
        if self.n_nodes < 5:
            raise ValueError("need at least 3 interior nodes per axis")
        if not self.R > 0:
            raise ValueError("box radius must be positive")
        if not (self.t > self.s_min and self.n_steps >= 2):
            raise ValueError("need t > s_min and at least two time steps")

    @property
    def dx(self) -> float:
        return 2.0 * self.R / (self.n_nodes - 1)

    @property
    def ds(self) -> float:
        return (self.t - self.s_min) / self.n_steps

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.n_nodes)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.s_min, self.t, self.n_steps + 1)

    @property
    def shape(self) -> tuple:
        return (self.n_nodes,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.dx**self.d

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(n_nodes^d, d)`` in C order."""
        ax = self.axis
        return np.stack(np.meshgrid(*([ax] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        return replace(self, n_nodes=(self.n_nodes - 1) * factor + 1, n_steps=self.n_steps * factor)

    def time_index(self, s: float, snap: bool = False) -> int:
        """Index of grid time ``s``; with ``snap`` the nearest grid time is used."""
        k = (s - self.s_min) / self.ds
        i = int(round(k))
        if not 0 <= i <= self.n_steps or (not snap and abs(k - i) > 1e-6):
            raise ValueError(f"s={s} is not on the time grid")
        return i

    @classmethod
    def default(cls, d: int, R: float, t: float = 1.0, s_min: float = 0.0) -> "SpaceTimeGrid":
        if d == 1:
            return cls(1, R, 513, s_min, t, 512)
        return cls(2, R, 129, s_min, t, 128)


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 0.5
    sigma_delta: Optional[float] = None
    tol: float = 1e-10
    peclet_threshold: float = 2.0
    upwind_threshold: float = 1.0  # faces above this Peclet number are upwinded

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [1/2, 1], got {self.theta}")

    def mollifier_width(self, grid: SpaceTimeGrid) -> float:
        sig = 3.0 * grid.dx if self.sigma_delta is None else float(self.sigma_delta)
        if sig < 2.0 * grid.dx - 1e-12:
            raise ValueError(f"sigma_delta={sig} is below 2 dx={2 * grid.dx}")
        return sig


def truncation_radius(cert: StaticCertificate, x, M: float, target_defect: float) -> float:
    """Smallest box radius whose tightness bound ``(Z(x)+M)/inf_{|y|>=R} Z`` is below ``target_defect``."""
    if not 0 < target_defect < 1:
        raise ValueError(f"target defect must lie in (0, 1), got {target_defect}")
    if not math.isfinite(M) or M < 0:
        raise ValueError(f"M must be finite and nonnegative, got {M}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    floor = max(2.0, float(np.linalg.norm(x)) + 1.0)
    zx = float(cert.value(x.reshape(1, -1))[0])
    lg = math.log((zx + M) / target_defect)
    if lg <= 0:
        return floor
    return max(floor, (lg / cert.delta) ** (1.0 / cert.beta))


# ---------------------------------------------------------------------------
# slices
# ---------------------------------------------------------------------------

@dataclass
class KernelSlice:
    t: float
    x: np.ndarray
    grid: SpaceTimeGrid
    values: np.ndarray = field(repr=False)
    sigma_delta: float
    scheme: dict
    defect: Optional[float] = 0.0
    min_raw: float = 0.0
    warnings: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def quadrature_weights(self) -> np.ndarray:
        w1 = np.full(self.grid.n_nodes, self.grid.dx)
        w1[0] = w1[-1] = 0.5 * self.grid.dx
        w = w1
        for _ in range(self.grid.d - 1):
            w = np.multiply.outer(w, w1)
        return w

    def mass(self) -> np.ndarray:
        axes = tuple(range(1, self.grid.d + 1))
        return np.sum(self.values * self.quadrature_weights(), axis=axes)

    def at(self, s: float) -> np.ndarray:
        return self.values[self.grid.time_index(s)]

    # serialisation -----------------------------------------------------
    def sidecar(self) -> dict:
        g = self.grid
        return {"t": self.t, "x": np.atleast_1d(self.x).tolist(), "R": g.R, "dx": g.dx, "ds": g.ds,
                "sigma_delta": self.sigma_delta, "theta": self.scheme.get("theta"),
                "defect": self.defect, "d": g.d, "n_nodes": g.n_nodes, "n_steps": g.n_steps,
                "s_min": g.s_min, "scheme": self.scheme}

    def to_csv(self, path) -> Path:
        path = Path(path)
        g = self.grid
        nodes = g.nodes()
        header = "s," + ",".join(f"y{i + 1}" for i in range(g.d)) + ",g"
        flat = self.values.reshape(len(g.times), -1)
        rows = np.column_stack([np.repeat(g.times, nodes.shape[0]),
                                np.tile(nodes, (len(g.times), 1)), flat.reshape(-1)])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2))
        return path

    @classmethod
    def from_csv(cls, path) -> "KernelSlice":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        grid = SpaceTimeGrid(meta["d"], meta["R"], meta["n_nodes"], meta["s_min"], meta["t"],
                             meta["n_steps"])
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        values = data[:, -1].reshape((grid.n_steps + 1,) + grid.shape)
        return cls(meta["t"], np.asarray(meta["x"]), grid, values, meta["sigma_delta"],
                   meta.get("scheme", {"theta": meta["theta"]}), meta["defect"])


# ---------------------------------------------------------------------------
# spatial discretisation
# ---------------------------------------------------------------------------

@dataclass
class _Stencil:
    """Index bookkeeping for the full node grid."""

    grid: SpaceTimeGrid

    def __post_init__(self):
        g = self.grid
        self.n = g.n_nodes
        self.idx = np.arange(self.n**g.d).reshape(g.shape)
        inner = np.ones(g.shape, dtype=bool)
        for a in range(g.d):
            sl = [slice(None)] * g.d
            sl[a] = [0, self.n - 1]
            inner[tuple(sl)] = False
        self.interior = self.idx[inner]
        self.nodes = g.nodes()
        self.faces = []
        for a in range(g.d):
            lo = [slice(None)] * g.d
            hi = [slice(None)] * g.d
            lo[a] = slice(0, self.n - 1)
            hi[a] = slice(1, self.n)
            left = self.idx[tuple(lo)].reshape(-1)
            right = self.idx[tuple(hi)].reshape(-1)
            pos = self.nodes[left].copy()
            pos[:, a] += 0.5 * g.dx
            self.faces.append((left, right, pos))
        # second-difference neighbours per axis, for interior nodes only
        self.neigh = []
        for a in range(g.d):
            step = self.n ** (g.d - 1 - a)
            self.neigh.append((self.interior - step, self.interior + step))


def _adjoint_matrix(field: CoefficientField, st: _Stencil, s: float, threshold: float):
    """Full-grid sparse matrix of ``A*(s)`` (rows of boundary nodes are empty).

    Returns ``(matrix, max_peclet, n_upwind_faces)``. Faces with cell Peclet
    number above ``threshold`` are upwinded; at or below 1 the centred flux
    keeps the off-diagonal entries nonnegative.
    """
    g = st.grid
    h = g.dx
    N = st.n**g.d
    pts = st.nodes
    Q = field.Q(s, pts)
    V = field.V(s, pts)
    rows, cols, vals = [], [], []
    ii = st.interior
    # diffusion: sum_a D_aa(q_aa u) + sum_{a != b} D_a D_b (q_ab u)
    for a in range(g.d):
        lo, hi = st.neigh[a]
        q = Q[:, a, a]
        rows += [ii, ii, ii]
        cols += [lo, ii, hi]
        vals += [q[lo] / h**2, -2.0 * q[ii] / h**2, q[hi] / h**2]
    if g.d == 2:
        q01 = Q[:, 0, 1] + Q[:, 1, 0]
        if np.any(q01 != 0):
            for sa, sb, sign in ((1, 1, 1.0), (-1, -1, 1.0), (1, -1, -1.0), (-1, 1, -1.0)):
                nb = ii + sa * st.n + sb
                rows.append(ii)
                cols.append(nb)
                vals.append(sign * q01[nb] / (4.0 * h * h))
    # drift: -div(F u) via face fluxes
    max_pe = 0.0
    n_up = 0
    for a, (left, right, pos) in enumerate(st.faces):
        Ff = field.F(s, pos)[:, a]
        qf = 0.5 * (Q[left, a, a] + Q[right, a, a])
        pe = np.abs(Ff) * h / (2.0 * qf)
        max_pe = max(max_pe, float(pe.max()))
        up = pe > threshold
        n_up += int(up.sum())
        wl = np.where(up, (Ff > 0).astype(float), 0.5)
        wr = 1.0 - wl
        # flux_f = F_f (wl u_L + wr u_R); node L gets -flux/h, node R gets +flux/h
        rows += [left, left, right, right]
        cols += [left, right, left, right]
        vals += [-Ff * wl / h, -Ff * wr / h, Ff * wl / h, Ff * wr / h]
    rows.append(ii)
    cols.append(ii)
    vals.append(-V[ii])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    return A, max_pe, n_up


def adjoint_operator(field: CoefficientField, grid: SpaceTimeGrid, s: float,
                     upwind_threshold: float = 1.0):
    """Interior block of the discrete adjoint operator at time ``s``."""
    st = _Stencil(grid)
    A, pe, nup = _adjoint_matrix(field, st, s, upwind_threshold)
    ii = st.interior
    return A[ii][:, ii].tocsr(), st, pe, nup


def _operators_over_time(field, grid, times, threshold):
    st = _Stencil(grid)
    ii = st.interior
    mats = []
    max_pe = 0.0
    n_up = 0
    samples = times if field.time_dependent else times[:1]
    for s in samples:
        A, pe, nup = _adjoint_matrix(field, st, float(s), threshold)
        mats.append(A[ii][:, ii].tocsr())
        max_pe = max(max_pe, pe)
        n_up = max(n_up, nup)
    return mats, st, max_pe, n_up


def _march(mats, u0, theta, dt, nsteps, tol, transpose=False):
    """Theta march of ``u' = M_k u`` with per-level matrices (one matrix = constant)."""
    if transpose:
        mats = [m.T.tocsr() for m in mats]
    n = u0.shape[0]
    if _is_tridiagonal(mats[0], n):
        lower = np.stack([np.concatenate([[0.0], m.diagonal(-1)]) for m in mats])
        diag = np.stack([m.diagonal(0) for m in mats])
        upper = np.stack([np.concatenate([m.diagonal(1), [0.0]]) for m in mats])
        return kernels.theta_march(lower, diag, upper, u0, theta, dt, nsteps)
    return _march_iterative(mats, u0, theta, dt, nsteps, tol)


def _is_tridiagonal(m, n) -> bool:
    coo = m.tocoo()
    return bool(np.all(np.abs(coo.row - coo.col) <= 1))


def _march_iterative(mats, u0, theta, dt, nsteps, tol):
    n = u0.shape[0]
    eye = sp.identity(n, format="csr")
    out = np.empty((nsteps + 1, n))
    out[0] = u0
    u = u0.copy()
    const = len(mats) == 1
    lhs = None
    for k in range(nsteps):
        m0 = mats[0 if const else k]
        m1 = mats[0 if const else k + 1]
        rhs = u + (1.0 - theta) * dt * (m0 @ u)
        if lhs is None or not const:
            lhs = (eye - theta * dt * m1).tocsr()
            dinv = 1.0 / lhs.diagonal()
            prec = LinearOperator((n, n), matvec=lambda v, dinv=dinv: dinv * v)
        u, info = bicgstab(lhs, rhs, x0=u, rtol=tol, atol=0.0, M=prec, maxiter=5000)
        if info != 0:
            raise SolverError(f"linear solve failed at step {k} (bicgstab info={info})")
        out[k + 1] = u
    return out


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def mollified_delta(grid: SpaceTimeGrid, x, sigma: float) -> np.ndarray:
    """Normalised Gaussian bump on the grid (zero on the boundary)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = grid.nodes() - x
    bump = np.exp(-0.5 * np.einsum("ni,ni->n", z, z) / sigma**2).reshape(grid.shape)
    for a in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[a] = [0, grid.n_nodes - 1]
        bump[tuple(sl)] = 0.0
    return bump / (bump.sum() * grid.cell_volume)


def _check_peclet(max_pe, cfg, where):
    notes = []
    theta = cfg.theta
    if max_pe > cfg.peclet_threshold:
        msg = (f"{where}: cell Peclet number {max_pe:.3g} exceeds {cfg.peclet_threshold}; "
               "advection under-resolved, using theta = 1")
        warnings.warn(msg, PecletWarning, stacklevel=3)
        notes.append(msg)
        theta = 1.0
    return theta, notes


def solve_kernel_slice(field: CoefficientField, t: float, x, cfg: SolverConfig,
                       grid: SpaceTimeGrid, cert: Optional[StaticCertificate] = None,
                       M: Optional[float] = None, target_defect: Optional[float] = None) -> KernelSlice:
    """Kernel slice ``g(t, s, x, y)`` for all grid times ``s`` and nodes ``y``.

    When a certificate (with ``M`` and ``target_defect``) is given, the box is
    required to contain the corresponding truncation radius.
    """
    if grid.d != field.d:
        raise ValueError("grid and field dimensions differ")
    if abs(grid.t - t) > 1e-12:
        raise ValueError("grid terminal time must equal t")
    if t - grid.s_min < 2 * grid.ds - 1e-12:
        raise ValueError("time window shorter than two steps")
    if cert is not None and M is not None and target_defect is not None:
        need = truncation_radius(cert, x, M, target_defect)
        if grid.R < need - 1e-9:
            raise ValueError(f"box radius {grid.R} is below the truncation radius {need}")
    sigma = cfg.mollifier_width(grid)
    times_desc = grid.times[::-1]
    mats, st, max_pe, n_up = _operators_over_time(field, grid, times_desc, cfg.upwind_threshold)
    theta, notes = _check_peclet(max_pe, cfg, "kernel slice")
    u0 = mollified_delta(grid, x, sigma).reshape(-1)[st.interior]
    try:
        sol = _march(mats, u0, theta, grid.ds, grid.n_steps, cfg.tol)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        raise SolverError(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SolverError("non-finite values in kernel slice")
    full = np.zeros((grid.n_steps + 1, grid.n_nodes**grid.d))
    full[:, st.interior] = sol
    full = full[::-1].reshape((grid.n_steps + 1,) + grid.shape)
    min_raw = float(full.min())
    values = np.maximum(full, 0.0)
    slc = KernelSlice(t, np.atleast_1d(np.asarray(x, dtype=float)), grid, values, sigma,
                      {"theta": theta, "requested_theta": cfg.theta, "form": "divergence",
                       "max_peclet": max_pe, "upwind_faces": n_up,
                       "backend": kernels.BACKEND if grid.d == 1 else "bicgstab-jacobi"},
                      0.0, min_raw, notes)
    if _potential_vanishes(field, grid):
        slc.defect = float(max(0.0, np.max(1.0 - slc.mass())))
    else:
        slc.defect = None  # killing and leakage are indistinguishable; measure on g0
    return slc


def _potential_vanishes(field: CoefficientField, grid: SpaceTimeGrid) -> bool:
    nodes = grid.nodes()
    times = grid.times if field.time_dependent else grid.times[:1]
    return all(not np.any(field.V(float(s), nodes)) for s in times)


def solve_reference_kernel_g0(field: CoefficientField, t: float, x, cfg: SolverConfig,
                              grid: SpaceTimeGrid, **kw) -> KernelSlice:
    """Kernel of the operator without potential."""
    return solve_kernel_slice(field.without_potential(), t, x, cfg, grid, **kw)


def solve_cauchy(field: CoefficientField, f, s: float, t: float, cfg: SolverConfig,
                 grid: SpaceTimeGrid, return_all: bool = False) -> np.ndarray:
    """Forward solution ``u(t, .)`` of ``d_t u = A(t) u``, ``u(s) = f`` on the grid.

    ``f`` is a callable on points ``(n, d)`` or an array of node values. The
    boundary is absorbing, matching the kernel slice. ``grid.s_min`` and
    ``grid.t`` must equal ``s`` and ``t``.
    """
    if abs(grid.s_min - s) > 1e-12 or abs(grid.t - t) > 1e-12:
        raise ValueError("grid time window must be [s, t]")
    if grid.d != field.d:
        raise ValueError("grid and field dimensions differ")
    fv = f(grid.nodes()) if callable(f) else np.asarray(f, dtype=float).reshape(-1)
    if not np.all(np.isfinite(fv)):
        raise ValueError("initial datum must be bounded on the grid")
    mats, st, max_pe, _ = _operators_over_time(field, grid, grid.times, cfg.upwind_threshold)
    theta, _ = _check_peclet(max_pe, cfg, "cauchy")
    sol = _march(mats, fv[st.interior], theta, grid.ds, grid.n_steps, cfg.tol, transpose=True)
    full = np.zeros((grid.n_steps + 1, grid.n_nodes**grid.d))
    full[:, st.interior] = sol
    full = full.reshape((grid.n_steps + 1,) + grid.shape)
    return full if return_all else full[-1]


def kernel_quadrature(slc: KernelSlice, f, s: float) -> float:
    """Trapezoidal ``int f(y) g(t, s, x, y) dy`` over the box."""
    fv = _node_values(slc.grid, f)
    return float(np.sum(fv * slc.at(s) * slc.quadrature_weights()))


def _node_values(grid, f):
    if callable(f):
        return np.asarray(f(grid.nodes()), dtype=float).reshape(grid.shape)
    return np.asarray(f, dtype=float).reshape(grid.shape)


def quadrature_all_times(slc: KernelSlice, f_values: np.ndarray) -> np.ndarray:
    """``int f(s, y) g(t, s, x, y) dy`` for every grid time; ``f_values`` broadcasts against the slice."""
    axes = tuple(range(1, slc.grid.d + 1))
    return np.sum(f_values * slc.values * slc.quadrature_weights(), axis=axes)


def validate_evolution_identity(field: CoefficientField, f: TestFunction, t: float, s0: float,
                                s1: float, x, cfg: SolverConfig, grid: SpaceTimeGrid,
                                slc: Optional[KernelSlice] = None) -> float:
    """Relative residual of ``G(t,s1)f(x) - G(t,s0)f(x) = -int_{s0}^{s1} G(t,r) A(r) f(x) dr``."""
    if not s0 < s1 <= t:
        raise ValueError("need s0 < s1 <= t")
    sigma = cfg.mollifier_width(grid)
    if f.support_radius is not None:
        c = np.zeros(grid.d) if f.center is None else np.atleast_1d(f.center)
        reach = float(np.max(np.abs(c))) + f.support_radius
        if reach > grid.R - 4.0 * sigma:
            raise ValueError("test function support is too close to the box boundary")
    if slc is None:
        slc = solve_kernel_slice(field, t, x, cfg, grid)
    i0, i1 = grid.time_index(s0, snap=True), grid.time_index(s1, snap=True)
    if i1 <= i0:
        raise ValueError("s0 and s1 fall on the same grid time")
    times = grid.times[i0:i1 + 1]
    nodes = grid.nodes()
    fv = f.value(nodes).reshape(grid.shape)
    lhs = kernel_quadrature(slc, fv, times[-1]) - kernel_quadrature(slc, fv, times[0])
    integrand = np.array([kernel_quadrature(slc, apply_operator(field, f, float(r), nodes), float(r))
                          for r in times])
    rhs = -np.trapezoid(integrand, times)
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-12)


def heat_kernel(tau, x, y, q: float = 1.0, sigma: float = 0.0) -> np.ndarray:
    """Gaussian kernel of ``q Lap`` in 1D, optionally convolved with a Gaussian of width ``sigma``."""
    var = 2.0 * q * np.asarray(tau, dtype=float) + sigma**2
    return np.exp(-((np.asarray(y) - x) ** 2) / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)
