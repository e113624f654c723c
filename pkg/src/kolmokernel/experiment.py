"""Declarative experiments: config parsing, the staged pipeline and plot data.

Stages run in order ``certify -> solve -> moments -> bounds -> approximation``.
A failing stage halts the stages that depend on it; independent ones still run.
Reports are deterministic given ``(config, seed)`` apart from the ``timing``
block.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .approximation import (build_cutoff_profile, build_truncated_operator, convergence_sweep,
                            remapped_constant_table)
from .bounds import (TimeWindow, WeightSystem, assemble_main_bound, bound_log_margin,
                     check_mass_bound, check_zeta_bound, compute_gamma_moments, compute_weight_constants,
                     compute_zeta, select_regime, verify_theorem_bound)
from .expressions import custom_field
from .lyapunov import (StaticCertificate, TimeDependentLyapunov, build_time_dependent_W,
                       check_domination, check_static_certificate, check_time_dependent,
                       default_time_samples, sample_points)
from .operators import CoefficientField, build_example_operator, check_ellipticity
from .solver import (KernelSlice, PecletWarning, SolverConfig, SolverError, SpaceTimeGrid,
                     solve_kernel_slice, solve_reference_kernel_g0, truncation_radius)

log = logging.getLogger(__name__)

WORKERS_ENV = "KOLMOKERNEL_WORKERS"
EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
STAGES = ("certify", "solve", "moments", "bounds", "approximation")


class ConfigError(ValueError):
    """Invalid experiment configuration (names the violated constraint)."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw else min(4, os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class CertificateSpec:
    delta: float
    beta: Optional[float] = None
    case: str = "i"
    M_radius: float = 8.0
    n_axis: int = 129
    n_random: int = 1000
    n_times: int = 64


@dataclass
class WSpec:
    eps: float
    alpha: float
    h: Optional[list] = None  # [coefficient, exponent]; derived for the example family


@dataclass
class SolverSpec:
    R: Optional[float] = None
    target_defect: float = 1e-6
    n_nodes: Optional[int] = None
    n_steps: Optional[int] = None
    theta: float = 0.5
    sigma_delta: Optional[float] = None


@dataclass
class AnchorSpec:
    t: float = 1.0
    x: list = field(default_factory=lambda: [0.0])
    s_min: float = 0.0


@dataclass
class BoundSpec:
    alpha: float
    eps: float
    k: Optional[float] = None
    regime: Optional[int] = None
    eps_weights: Optional[list] = None
    sweep: list = field(default_factory=list)


@dataclass
class ApproxSpec:
    levels: list
    W1: dict
    K_radius: Optional[float] = None
    mu: float = 0.05


@dataclass
class ExperimentConfig:
    name: str
    operator: dict
    certificate: CertificateSpec
    W: list
    window: dict
    bounds: BoundSpec
    solver: SolverSpec = field(default_factory=SolverSpec)
    anchor: AnchorSpec = field(default_factory=AnchorSpec)
    approximation: Optional[ApproxSpec] = None
    seed: int = 0
    output: Optional[str] = None

    # -- parsing ---------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(raw)
        if "Z" in data:  # certificate section under its short name
            if "certificate" in data:
                raise ConfigError("give either 'Z' or 'certificate', not both")
            data["certificate"] = data.pop("Z")
        try:
            cfg = cls(
                name=str(data.pop("name")),
                operator=dict(data.pop("operator")),
                certificate=_build(CertificateSpec, data.pop("certificate"), "certificate"),
                W=[_build(WSpec, w, f"W[{i}]") for i, w in enumerate(data.pop("W"))],
                window=dict(data.pop("window")),
                bounds=_build(BoundSpec, data.pop("bounds"), "bounds"),
                solver=_build(SolverSpec, data.pop("solver", {}), "solver"),
                anchor=_build(AnchorSpec, data.pop("anchor", {}), "anchor"),
                approximation=(None if data.get("approximation") is None
                               else _build(ApproxSpec, data.pop("approximation"), "approximation")),
                seed=int(data.pop("seed", 0)),
                output=data.pop("output", None),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config section {exc.args[0]!r}") from None
        data.pop("approximation", None)
        if data:
            raise ConfigError(f"unknown config keys: {sorted(data)}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    # -- validation ------------------------------------------------------
    @property
    def d(self) -> int:
        return int(self.operator.get("d", 1))

    def validate(self) -> None:
        op = self.operator
        fam = op.get("family")
        if fam not in ("example", "custom"):
            raise ConfigError(f"operator.family must be 'example' or 'custom', got {fam!r}")
        if self.d not in (1, 2):
            raise ConfigError(f"operator.d must be 1 or 2, got {self.d}")
        if fam == "example":
            for key in ("m", "p", "r"):
                if key not in op:
                    raise ConfigError(f"operator.{key} is required for the example family")
            if not op["p"] > 1:
                raise ConfigError(f"operator: p > 1 violated (p={op['p']})")
            if op["m"] < 0 or op["r"] < 0:
                raise ConfigError("operator: m >= 0 and r >= 0 required")
        else:
            for key in ("Q", "eta"):
                if key not in op:
                    raise ConfigError(f"operator.{key} is required for custom fields")
            if self.certificate.beta is None:
                raise ConfigError("certificate.beta is required for custom fields")
            if any(w.h is None for w in self.W):
                raise ConfigError("W[*].h = [coefficient, exponent] is required for custom fields")
        c = self.certificate
        if not c.delta > 0:
            raise ConfigError("certificate: delta > 0 violated")
        if c.case not in ("i", "ii"):
            raise ConfigError(f"certificate.case must be 'i' or 'ii', got {c.case!r}")
        if c.M_radius < 2:
            raise ConfigError("certificate: M_radius >= 2 violated")
        for i, w in enumerate(self.W):
            if not (w.eps >= 0 and w.alpha > 0):
                raise ConfigError(f"W[{i}]: eps >= 0 and alpha > 0 required")
        s = self.solver
        if not 0.5 <= s.theta <= 1.0:
            raise ConfigError(f"solver: theta in [1/2, 1] violated (theta={s.theta})")
        if not 0 < s.target_defect < 1:
            raise ConfigError(f"solver: target_defect in (0, 1) violated ({s.target_defect})")
        if s.R is not None and not s.R > 0:
            raise ConfigError("solver: R > 0 violated")
        a = self.anchor
        if not 0 < a.t <= 1:
            raise ConfigError(f"anchor: 0 < t <= 1 violated (t={a.t})")
        if not 0 <= a.s_min < a.t:
            raise ConfigError("anchor: 0 <= s_min < t violated")
        if len(a.x) != self.d:
            raise ConfigError(f"anchor.x must have {self.d} components")
        try:
            win = self.time_window()
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"window: {exc}") from None
        if win.a0 < a.s_min:
            raise ConfigError("window: a0 >= anchor.s_min violated")
        b = self.bounds
        if self.k <= self.d + 2:
            raise ConfigError(f"bounds: k > d + 2 violated (k={self.k}, d={self.d})")
        if b.regime not in (None, 1, 2):
            raise ConfigError("bounds.regime must be 1, 2 or null")
        if b.eps_weights is not None:
            e = b.eps_weights
            if len(e) != 3 or not 0 < e[0] < e[1] < e[2] < c.delta:
                raise ConfigError(f"bounds: 0 < eps0 < eps1 < eps2 < delta violated ({e}, delta={c.delta})")
        ap = self.approximation
        if ap is not None:
            if not ap.levels or any(n < 1 for n in ap.levels):
                raise ConfigError("approximation: levels must be >= 1")
            if any(y <= x for x, y in zip(ap.levels, ap.levels[1:])):
                raise ConfigError("approximation: levels must be strictly increasing")
            if not 0 < ap.mu < 0.2:
                raise ConfigError("approximation: mu in (0, 0.2) violated")
            if "eps" not in ap.W1 or "alpha" not in ap.W1:
                raise ConfigError("approximation.W1 needs eps and alpha")

    @property
    def k(self) -> float:
        return float(self.bounds.k) if self.bounds.k is not None else self.d + 3.0

    def time_window(self) -> TimeWindow:
        w = self.window
        return TimeWindow(float(w["a0"]), float(w["a"]), float(w["b"]), float(w["b0"]),
                          float(w.get("t", self.anchor.t)))

    def build_field(self) -> CoefficientField:
        op = self.operator
        if op["family"] == "example":
            return build_example_operator(float(op["m"]), float(op["p"]), float(op["r"]), self.d)
        return custom_field({**op, "d": self.d})

    def beta(self) -> float:
        if self.certificate.beta is not None:
            return float(self.certificate.beta)
        op = self.operator
        if self.certificate.case == "i":
            return float(op["p"]) + 1.0 - float(op["m"])
        return 0.5 * (float(op["r"]) + 2.0 - float(op["m"]))


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    status: str  # pass | fail | error | skipped
    data: dict = field(default_factory=dict)
    message: str = ""

    def to_dict(self) -> dict:
        return {"status": self.status, "message": self.message, **_jsonable(self.data)}


@dataclass
class RunReport:
    config: dict
    seed: int
    stages: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def exit_code(self) -> int:
        statuses = [s.status for s in self.stages.values()]
        if "error" in statuses:
            return EXIT_NUMERIC
        if "fail" in statuses:
            return EXIT_VERIFY
        return EXIT_OK

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {"tool": "kolmokernel", "version": self.version, "seed": self.seed,
               "config": self.config, "stages": {k: v.to_dict() for k, v in self.stages.items()},
               "warnings": list(self.warnings), "exit_code": self.exit_code}
        if include_timing:
            out["timing"] = dict(self.timing)
        return out

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    return obj


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class Pipeline:
    """Holds the intermediate objects shared between stages."""

    def __init__(self, cfg: ExperimentConfig, out_dir, refine: int = 2, seed: Optional[int] = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.refine = int(refine)
        self.seed = cfg.seed if seed is None else int(seed)
        self.field = cfg.build_field()
        self.report = RunReport(cfg.to_dict(), self.seed)
        self.M: Optional[float] = None
        self.cert: Optional[StaticCertificate] = None
        self.Ws: list[TimeDependentLyapunov] = []
        self.slice: Optional[KernelSlice] = None
        self.slice0: Optional[KernelSlice] = None
        self.R: Optional[float] = None
        self.zeta_unreliable = False
        self.zeta_profiles: dict = {}

    # helpers -----------------------------------------------------------
    def _stage(self, name, fn, requires=()):
        blocked = [r for r in requires if self.report.stages.get(r) is None
                   or self.report.stages[r].status != "pass"]
        if blocked:
            self.report.stages[name] = StageResult("skipped", message=f"depends on {', '.join(blocked)}")
            return
        t0 = time.perf_counter()
        try:
            res = fn()
        except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
            res = StageResult("error", message=f"{type(exc).__name__}: {exc}")
        except ValueError as exc:
            res = StageResult("fail", message=str(exc))
        self.report.timing[name] = time.perf_counter() - t0
        self.report.stages[name] = res

    def _grid(self, factor: int = 1) -> SpaceTimeGrid:
        s = self.cfg.solver
        base = SpaceTimeGrid.default(self.cfg.d, self.R, self.cfg.anchor.t, self.cfg.anchor.s_min)
        n_nodes = s.n_nodes or base.n_nodes
        n_steps = s.n_steps or base.n_steps
        g = SpaceTimeGrid(self.cfg.d, self.R, n_nodes, self.cfg.anchor.s_min, self.cfg.anchor.t, n_steps)
        return g.refined(factor) if factor > 1 else g

    def _solver_cfg(self, factor: int = 1) -> SolverConfig:
        s = self.cfg.solver
        sig = None if s.sigma_delta is None else s.sigma_delta / factor
        return SolverConfig(theta=s.theta, sigma_delta=sig)

    def _solve_pair(self, factor: int = 1):
        grid, scfg = self._grid(factor), self._solver_cfg(factor)
        t, x = self.cfg.anchor.t, self.cfg.anchor.x
        with ThreadPoolExecutor(max_workers=min(2, worker_count())) as pool:
            fg = pool.submit(solve_kernel_slice, self.field, t, x, scfg, grid)
            f0 = pool.submit(solve_reference_kernel_g0, self.field, t, x, scfg, grid)
            return fg.result(), f0.result()

    # stages ------------------------------------------------------------
    def certify(self) -> StageResult:
        cfg, c = self.cfg, self.cfg.certificate
        beta = cfg.beta()
        self.cert = StaticCertificate(c.delta, beta)
        times = default_time_samples(cfg.anchor.t, c.n_times, 1.0)
        static = check_static_certificate(self.field, self.cert,
                                          sample_points(cfg.d, c.M_radius, times, c.n_axis, c.n_random,
                                                        self.seed))
        data: dict = {"static": static.to_dict()}
        M = static.details["M"]
        R_check = None
        if math.isfinite(M):
            # cover twice the truncation radius of the paired kernel experiment
            R_kernel = cfg.solver.R or truncation_radius(self.cert, cfg.anchor.x, M, cfg.solver.target_defect)
            R_check = max(c.M_radius, 2.0 * R_kernel)
            if R_check > c.M_radius:
                static = check_static_certificate(
                    self.field, self.cert,
                    sample_points(cfg.d, R_check, times, c.n_axis, c.n_random, self.seed))
                data["static"] = static.to_dict()
                M = static.details["M"]
        self.M = M
        data["M"] = M
        data["R_check"] = R_check
        passed = static.passed
        ell = check_ellipticity(self.field, sample_points(cfg.d, R_check or c.M_radius, times[::8],
                                                          33, 200, self.seed))
        data["ellipticity"] = {"pass": ell.passed, "min_margin": ell.min_margin}
        passed &= ell.passed
        td_samples = sample_points(cfg.d, R_check or c.M_radius,
                                   default_time_samples(cfg.anchor.t, c.n_times, 0.9), c.n_axis,
                                   c.n_random, self.seed, t_range=(0.0, 0.9 * cfg.anchor.t))
        data["W"] = []
        self.Ws = []
        for spec in cfg.W:
            try:
                W = self._build_W(spec, beta)
            except ValueError as exc:
                data["W"].append({"eps": spec.eps, "alpha": spec.alpha, "pass": False, "error": str(exc)})
                passed = False
                continue
            self.Ws.append(W)
            rep = check_time_dependent(self.field, W, td_samples)
            dom = check_domination(W, td_samples)
            data["W"].append({"eps": W.eps, "alpha": W.alpha, "beta": W.beta, "h": [W.h_coeff, W.h_exp],
                              "check": rep.to_dict(), "domination": dom.to_dict(),
                              "pass": rep.passed and dom.passed})
            passed &= rep.passed and dom.passed
        msg = "; ".join(static.notes) if static.notes else ""
        return StageResult("pass" if passed else "fail", data, msg)

    def _build_W(self, spec: WSpec, beta: float) -> TimeDependentLyapunov:
        cfg = self.cfg
        op = cfg.operator
        if op["family"] == "example" and spec.h is None:
            return build_time_dependent_W(float(op["m"]), float(op["p"]), float(op["r"]),
                                          cfg.certificate.case, spec.eps, cfg.certificate.delta,
                                          spec.alpha, cfg.anchor.t, cfg.d)
        if not 0 <= spec.eps < cfg.certificate.delta:
            raise ValueError(f"eps < delta violated (eps={spec.eps}, delta={cfg.certificate.delta})")
        coeff, e_h = spec.h
        if not e_h > -1:
            raise ValueError(f"rate exponent > -1 violated (e_h={e_h})")
        return TimeDependentLyapunov(cfg.anchor.t, spec.eps, spec.alpha, beta, float(coeff), float(e_h),
                                     self.cert)

    def solve(self) -> StageResult:
        cfg = self.cfg
        data: dict = {}
        if cfg.solver.R is not None:
            self.R = float(cfg.solver.R)
        else:
            if self.M is None or not math.isfinite(self.M):
                raise ValueError("no finite M from the certificate: set solver.R explicitly")
            self.R = truncation_radius(self.cert, cfg.anchor.x, self.M, cfg.solver.target_defect)
            floor = max(2.0, float(np.linalg.norm(cfg.anchor.x)) + 1.0)
            if self.R <= floor + 1e-12:
                self._warn(f"truncation radius clamped to {self.R:g}; zeta checks flagged unreliable")
                self.zeta_unreliable = True
        if cfg.solver.target_defect > 1e-2:
            self._warn(f"truncation radius clamped (target_defect {cfg.solver.target_defect:g} "
                       "exceeds the zeta tolerance); zeta checks flagged unreliable")
            self.zeta_unreliable = True
        import warnings as _w
        with _w.catch_warnings(record=True) as caught:
            _w.simplefilter("always", PecletWarning)
            self.slice, self.slice0 = self._solve_pair()
        for w in caught:
            self._warn(str(w.message))
        if self.slice.defect is None:
            self.slice.defect = self.slice0.defect
        self.out.mkdir(parents=True, exist_ok=True)
        self.slice.to_csv(self.out / "slice.csv")
        mass = self.slice.mass()
        dom = float(np.max(self.slice.values - self.slice0.values))
        data.update({"R": self.R, "dx": self.slice.grid.dx, "ds": self.slice.grid.ds,
                     "sigma_delta": self.slice.sigma_delta, "scheme": self.slice.scheme,
                     "defect": self.slice.defect, "max_mass": float(mass.max()),
                     "min_mass": float(mass.min()), "max_g_minus_g0": dom,
                     "min_raw": self.slice.min_raw})
        passed = bool(mass.max() <= 1 + 1e-6 and dom <= 1e-6 and self.slice.min_raw >= -1e-8)
        return StageResult("pass" if passed else "fail", data)

    def moments(self) -> StageResult:
        cfg = self.cfg
        win = cfg.time_window()
        g1, g2 = compute_gamma_moments(self.slice, self.field, cfg.k, win)
        data: dict = {"Gamma1": g1, "Gamma2": g2, "zeta": [], "zeta_unreliable": self.zeta_unreliable}
        passed = True
        rows = {"s": self.slice.grid.times}
        for i, W in enumerate(self.Ws):
            prof = compute_zeta(self.slice, W, win)
            rep = check_zeta_bound(prof, W)
            data["zeta"].append({"eps": W.eps, "alpha": W.alpha, "sup": prof.sup, "integral": prof.integral,
                                 **rep.to_dict()})
            rows[f"zeta_{i}"] = prof.values
            rows[f"bound_{i}"] = np.exp(np.asarray(W.h_integral(self.slice.grid.times), dtype=float))
            passed &= rep.passed
        if self.M is not None and math.isfinite(self.M):
            mb = check_mass_bound(self.slice, self.cert, self.M)
            data["mass_bound"] = mb.to_dict()
            passed &= mb.passed
        else:
            data["mass_bound"] = {"pass": False, "message": "no finite M"}
            passed = False
        self.zeta_profiles = rows
        _write_columns(self.out / "zeta.csv", rows)
        status = "pass" if passed else "fail"
        msg = "zeta checks unreliable (truncation)" if self.zeta_unreliable else ""
        return StageResult(status, data, msg)

    def bounds(self) -> StageResult:
        cfg = self.cfg
        b = cfg.bounds
        op = cfg.operator
        data: dict = {}
        passed = True
        win = cfg.time_window()
        if op["family"] == "example":
            m, p, r = float(op["m"]), float(op["p"]), float(op["r"])
            spec = select_regime(m, p, r, force=b.regime)
            natural = select_regime(m, p, r)
            data["regime"] = {"selected": spec.regime, "natural": natural.regime, "beta": spec.beta,
                              "alpha0": spec.alpha0, "eps_max": spec.eps_max, "Lambda": spec.Lambda,
                              "exponent_formula": spec.formula()}
            if b.eps_weights is not None:
                ws = WeightSystem(cfg.k, tuple(b.eps_weights), cfg.certificate.delta, b.alpha,
                                  cfg.beta(), win, cfg.d)
                ws = compute_weight_constants(m, p, r, ws, self.field)
                Wj = [ws.lyapunov(j, m, p) for j in (1, 2)]
                z1 = compute_zeta(self.slice, Wj[0], win)
                z2 = compute_zeta(self.slice, Wj[1], win)
                rhs34 = assemble_main_bound(ws, z1.sup, z1.integral, z2.integral, "thm34")
                rhs45 = assemble_main_bound(ws, z1.sup, z1.integral, z2.integral, "thm45")
                remapped = remapped_constant_table(ws.constants, self.field.eta)
                data["weights"] = {"eps": list(ws.eps), "sigma": ws.sigma, "constants": ws.constants,
                                   "gammas": ws.gammas, "cbar": ws.cbar, "diagnostics": ws.diagnostics,
                                   "zeta1": {"sup": z1.sup, "integral": z1.integral},
                                   "zeta2": {"integral": z2.integral},
                                   "rhs_thm34": rhs34, "rhs_thm45": rhs45,
                                   "rhs_remapped": assemble_main_bound(ws, z1.sup, z1.integral,
                                                                      z2.integral, "thm34", remapped)}
                sup_wrho = self._weighted_sup(ws)
                data["weights"]["sup_w_rho"] = sup_wrho
                data["weights"]["C1_fit"] = sup_wrho / rhs45 if rhs45 > 0 else None
                passed &= bool(ws.diagnostics["weight_order_ok"])
            fine = None
            if self.refine > 1:
                fine = solve_kernel_slice(self.field, cfg.anchor.t, cfg.anchor.x,
                                          self._solver_cfg(self.refine), self._grid(self.refine))
            check = b.regime is None or b.regime == natural.regime
            verdict = verify_theorem_bound(self.slice, spec, b.alpha, b.eps, cfg.k, refined=fine,
                                           check_parameters=check)
            data["verdict"] = verdict.to_dict()
            passed &= verdict.passed
            (self.out / "bound_verdict.json").write_text(verdict.to_json())
            sweep = []
            for alpha, eps, k in b.sweep:
                v = verify_theorem_bound(self.slice, spec, alpha, eps, k, refined=fine,
                                         check_parameters=check)
                sweep.append({"alpha": alpha, "eps": eps, "k": k, "C_fit": v.C_fit, "stable": v.stable})
            if sweep:
                _write_rows(self.out / "bound_sweep.csv", ["alpha", "eps", "k", "C_fit", "stable"], sweep)
                data["sweep"] = sweep
        else:
            data["verdict"] = None
            self._warn("bound verification needs the example family; skipped for custom fields")
        return StageResult("pass" if passed else "fail", data)

    def _weighted_sup(self, ws: WeightSystem) -> float:
        """``sup w rho`` over ``(a, b) x box``."""
        grid = self.slice.grid
        sel = (grid.times >= ws.window.a - 1e-12) & (grid.times <= ws.window.b + 1e-12)
        nodes = grid.nodes()
        best = 0.0
        for i in np.nonzero(sel)[0]:
            lw = ws.log_weight(0, grid.times[i], nodes).reshape(grid.shape)
            best = max(best, float(np.max(self.slice.values[i] * np.exp(lw))))
        return best

    def approximation(self) -> StageResult:
        cfg = self.cfg
        ap = cfg.approximation
        op = cfg.operator
        cutoff = build_cutoff_profile(ap.mu)
        cutoff.dump(self.out / "cutoff.csv")
        if op["family"] == "example" and "h" not in ap.W1:
            W1 = build_time_dependent_W(float(op["m"]), float(op["p"]), float(op["r"]),
                                        cfg.certificate.case, float(ap.W1["eps"]), cfg.certificate.delta,
                                        float(ap.W1["alpha"]), cfg.anchor.t, cfg.d)
        else:
            W1 = self._build_W(WSpec(float(ap.W1["eps"]), float(ap.W1["alpha"]), ap.W1.get("h")),
                               cfg.beta())
        if self.R is None:
            self.R = float(cfg.solver.R) if cfg.solver.R is not None else None
        if self.R is None:
            raise ValueError("approximation needs a box radius (solve stage or solver.R)")
        win = cfg.time_window()
        rows, _ = convergence_sweep(self.field, ap.levels, W1, cfg.anchor.t, cfg.anchor.x,
                                    self._solver_cfg(), self._grid(), win.a0, win.b0, ap.K_radius,
                                    cutoff, self.out / "approx_sweep.csv", worker_count(),
                                    reference=self.slice)
        diffs = [r.sup_diff for r in rows]
        decreasing = all(b < a for a, b in zip(diffs, diffs[1:]))
        top_ok = rows[-1].rel_diff <= 0.05
        times = default_time_samples(cfg.anchor.t, cfg.certificate.n_times, 0.9)
        samples = sample_points(cfg.d, self.R, times, cfg.certificate.n_axis, cfg.certificate.n_random,
                                self.seed, t_range=(0.0, 0.9 * cfg.anchor.t))
        transfer = []
        for n in ap.levels:
            trunc = build_truncated_operator(self.field, n, W1, cutoff).field
            checks = [check_time_dependent(trunc, W, samples) for W in self.Ws]
            ell = check_ellipticity(trunc, samples)
            transfer.append({"n": n, "lyapunov_pass": all(c.passed for c in checks),
                             "worst_margin": min((c.worst_margin for c in checks), default=None),
                             "ellipticity_pass": ell.passed})
        passed = (decreasing and top_ok and cutoff.max_t_dphi <= 2.0
                  and all(t["lyapunov_pass"] and t["ellipticity_pass"] for t in transfer))
        data = {"rows": [asdict(r) for r in rows], "strictly_decreasing": decreasing,
                "top_level_relative": rows[-1].rel_diff, "max_t_dphi": cutoff.max_t_dphi,
                "transfer": transfer}
        return StageResult("pass" if passed else "fail", data)

    def _warn(self, msg: str) -> None:
        log.warning(msg)
        if msg not in self.report.warnings:
            self.report.warnings.append(msg)


STAGE_SETS = {
    "certify": ("certify",),
    "solve-kernel": ("certify", "solve"),
    "verify-bounds": ("certify", "solve", "moments", "bounds"),
    "approx-sweep": ("certify", "solve", "approximation"),
    "run": STAGES,
}

DEPENDS = {"certify": (), "solve": (), "moments": ("solve", "certify"), "bounds": ("solve",),
           "approximation": ("solve",)}


def run_experiment(cfg: ExperimentConfig, out_dir=None, stages=STAGES, refine: int = 2,
                   seed: Optional[int] = None) -> RunReport:
    """Run the selected stages and write ``report.json`` under ``out_dir``."""
    out = Path(out_dir or cfg.output or Path("runs") / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(cfg, out, refine, seed)
    t0 = time.perf_counter()
    for name in STAGES:
        if name not in stages:
            continue
        if name == "approximation" and cfg.approximation is None:
            pipe.report.stages[name] = StageResult("skipped", message="no approximation section")
            continue
        deps = DEPENDS[name]
        if name == "solve" and cfg.solver.R is None:
            deps = ("certify",)  # the box radius comes from the certificate's M
        pipe._stage(name, getattr(pipe, name), deps)
    pipe.report.timing["total"] = time.perf_counter() - t0
    pipe.report.write(out / "report.json")
    return pipe.report


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

PLOT_FILES = ("kernel_slice.csv", "zeta_profile.csv", "bound_margin.csv", "cutoff_profile.csv")


def emit_plots(run_dir) -> dict:
    """Write the plot-ready CSV set from a completed run directory.

    Returns the manifest (also written to ``plots_manifest.json``): emitted
    files and the reasons for any missing ones.
    """
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    emitted, missing = [], {}
    report = _read_json(run / "report.json")
    slc = None
    if (run / "slice.csv").exists() and (run / "slice.json").exists():
        slc = KernelSlice.from_csv(run / "slice.csv")
        _copy(run / "slice.csv", run / "kernel_slice.csv")
        _copy(run / "slice.json", run / "kernel_slice.json")
        emitted.append("kernel_slice.csv")
    else:
        missing["kernel_slice.csv"] = "no kernel slice in run"
    if (run / "zeta.csv").exists():
        _copy(run / "zeta.csv", run / "zeta_profile.csv")
        emitted.append("zeta_profile.csv")
    else:
        missing["zeta_profile.csv"] = "no zeta profile in run"
    verdict = _read_json(run / "bound_verdict.json")
    if slc is not None and verdict is not None and report is not None:
        op = report["config"]["operator"]
        spec = select_regime(float(op["m"]), float(op["p"]), float(op["r"]),
                             force=report["config"]["bounds"].get("regime"))
        times, vals = bound_log_margin(slc, spec, verdict["alpha"], verdict["eps"], verdict["k"])
        nodes = slc.grid.nodes()
        header = ["s"] + [f"y{i + 1}" for i in range(slc.grid.d)] + ["margin"]
        flat = vals.reshape(len(times), -1)
        rows = []
        for i, s in enumerate(times):
            ok = np.isfinite(flat[i])
            for y, v in zip(nodes[ok], flat[i][ok]):
                rows.append([s, *y, v])
        np.savetxt(run / "bound_margin.csv", np.array(rows), delimiter=",", header=",".join(header),
                   comments="", fmt="%.17g")
        emitted.append("bound_margin.csv")
    else:
        missing["bound_margin.csv"] = "no bound verdict in run"
    if (run / "cutoff.csv").exists():
        _copy(run / "cutoff.csv", run / "cutoff_profile.csv")
    elif report is not None:
        ap = report["config"].get("approximation") or {}
        build_cutoff_profile(ap.get("mu", 0.05)).dump(run / "cutoff_profile.csv")
    if (run / "cutoff_profile.csv").exists():
        emitted.append("cutoff_profile.csv")
    else:
        missing["cutoff_profile.csv"] = "no run report"
    manifest = {"run_dir": str(run), "emitted": emitted, "missing": missing}
    (run / "plots_manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _read_json(path: Path) -> Optional[Any]:
    return json.loads(path.read_text()) if path.exists() else None


def _copy(src: Path, dst: Path) -> None:
    dst.write_bytes(src.read_bytes())


def _write_columns(path: Path, cols: dict) -> None:
    names = list(cols)
    data = np.column_stack([np.asarray(cols[n], dtype=float) for n in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def _write_rows(path: Path, header: list, rows: list[dict]) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=header)
        wr.writeheader()
        wr.writerows(rows)
