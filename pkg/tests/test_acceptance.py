"""Release acceptance suite: one test per criterion, reported in the terminal summary."""

import math
import time

import numpy as np
import pytest

from kolmokernel.approximation import build_cutoff_profile, build_truncated_operator, remap_constants
from kolmokernel.bounds import (TimeWindow, WeightSystem, assemble_main_bound, envelope_bound,
                                largest_root, select_regime, verify_theorem_bound, weight_exponents,
                                x_root_bound)
from kolmokernel.experiment import ExperimentConfig, run_experiment
from kolmokernel.lyapunov import (StaticCertificate, build_time_dependent_W, check_static_certificate,
                                  check_time_dependent, default_time_samples, sample_points)
from kolmokernel.operators import (build_example_operator, constant_field, gaussian_bump,
                                   laplacian_field)
from kolmokernel.solver import (SolverConfig, SpaceTimeGrid, solve_kernel_slice, validate_evolution_identity)

from conftest import E2, E4, E8
from oracles import heat_kernel_1d, sup_power_exp

HEAT_GRID = SpaceTimeGrid(1, 8.0, 513, 0.0, 1.0, 512)


def oracle_error(slc, V=0.0):
    """Max relative error against ``e^(-V tau)`` times the (mollified) Gaussian on |y| <= 3, tau in [0.1, 0.9]."""
    g = slc.grid
    tau = slc.t - g.times
    sel = (tau >= 0.1 - 1e-12) & (tau <= 0.9 + 1e-12)
    ym = np.abs(g.axis) <= 3.0
    exact = np.exp(-V * tau[sel])[:, None] * heat_kernel_1d(tau[sel][:, None], g.axis[ym][None, :],
                                                            sigma=slc.sigma_delta)
    return float(np.max(np.abs(slc.values[sel][:, ym] - exact) / exact))


@pytest.fixture(scope="module")
def run032(config_dir, tmp_path_factory):
    cfg = ExperimentConfig.load(config_dir / "example_0_3_2.json")
    t0 = time.perf_counter()
    rep = run_experiment(cfg, tmp_path_factory.mktemp("acc032"), refine=2)
    return rep, time.perf_counter() - t0


@pytest.mark.acceptance(1, "Gaussian oracle, 2% relative on |y| <= 3, tau in [0.1, 0.9], <= 30 s")
def test_criterion_1_gaussian_oracle():
    t0 = time.perf_counter()
    slc = solve_kernel_slice(constant_field(1), 1.0, [0.0], SolverConfig(theta=0.5), HEAT_GRID)
    elapsed = time.perf_counter() - t0
    err = oracle_error(slc)
    print(f"criterion 1: max relative error {err:.4g}, runtime {elapsed:.2f} s")
    assert elapsed <= 30.0
    assert err <= 0.02


@pytest.mark.acceptance(2, "constant potential factorisation, 2% relative on the same region")
def test_criterion_2_constant_potential():
    slc = solve_kernel_slice(constant_field(1, potential=1.0), 1.0, [0.0], SolverConfig(theta=0.5),
                             HEAT_GRID)
    err = oracle_error(slc, V=1.0)
    print(f"criterion 2: max relative error {err:.4g}")
    assert err <= 0.02


@pytest.mark.acceptance(3, "sub-Markov mass and domination by g0 for (0,3,2)")
def test_criterion_3_sub_markov(run032):
    rep, _ = run032
    solve = rep.stages["solve"]
    assert solve.status == "pass"
    assert solve.data["max_mass"] <= 1 + 1e-6
    assert solve.data["max_g_minus_g0"] <= 1e-6


@pytest.mark.acceptance(4, "evolution identity residual: 5e-2 example operator, 2e-2 Laplacian")
def test_criterion_4_evolution_identity(example_field, example_grid, example_slice, heat_slice):
    bump = gaussian_bump([0.5], 0.3)
    res_ex = validate_evolution_identity(example_field, bump, 1.0, 0.0, 0.9, [0.0], SolverConfig(),
                                         example_grid, example_slice)
    res_lap = validate_evolution_identity(laplacian_field(), bump, 1.0, 0.0, 0.9, [0.0], SolverConfig(),
                                          HEAT_GRID, heat_slice)
    print(f"criterion 4: residuals {res_ex:.3g} (example), {res_lap:.3g} (Laplacian)")
    assert res_ex <= 5e-2
    assert res_lap <= 2e-2


@pytest.mark.acceptance(5, "certificate suite for (0,3,2), delta=0.2, beta=4, with truncated operators")
def test_criterion_5_certificates():
    fld = build_example_operator(0, 3, 2)
    static = check_static_certificate(fld, StaticCertificate(0.2, 4.0), sample_points(1, 8.0, [0.0, 0.5, 1.0]))
    W = build_time_dependent_W(0, 3, 2, "i", 0.1, 0.2, 2.5)
    samples = sample_points(1, 4.0, default_time_samples(1.0, 64), n_axis=129)
    td = check_time_dependent(fld, W, samples)
    cutoff = build_cutoff_profile()
    transfer = [check_time_dependent(build_truncated_operator(fld, n, W, cutoff).field, W, samples)
                for n in (E2, E4, E8)]
    parts = {
        "static": static.passed and math.isfinite(static.details.get("M", math.inf)),
        "star/star-star": td.passed and td.worst_margin >= -1e-8,
        "truncated": all(r.passed and r.worst_margin >= -1e-8 for r in transfer),
    }
    print(f"criterion 5: {parts}; static notes {static.notes}")
    assert all(parts.values()), parts


@pytest.mark.acceptance(6, "zeta ratio <= 1.02, mass bound, Phi monotone for (0,3,2)")
def test_criterion_6_zeta_and_mass(run032):
    rep, _ = run032
    mom = rep.to_dict()["stages"]["moments"]
    print(f"criterion 6: zeta ratios {[z['worst_ratio'] for z in mom['zeta']]}, "
          f"mass ratio {mom['mass_bound']['worst_ratio']}")
    assert mom["status"] == "pass"
    assert not mom["zeta_unreliable"]
    for z in mom["zeta"]:
        assert z["worst_ratio"] <= 1.02
        assert z["phi_monotone"]
    assert mom["mass_bound"]["pass"]


@pytest.mark.acceptance(7, "envelope (1e4 draws) and root bound (1e3 draws) properties, <= 5 s")
def test_criterion_7_envelope_and_roots():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    gamma = np.concatenate([[0.0], rng.uniform(1e-3, 10, 9999)])
    tau = rng.uniform(0.01, 10, 10_000)
    beta = rng.uniform(0.2, 6, 10_000)
    env = envelope_bound(gamma, tau, beta)
    # the supremum is attained at z* = (gamma / (tau beta))^(1/beta): check the value there
    zstar = (gamma / (tau * beta)) ** (1.0 / beta)
    at_star = np.where(gamma > 0, np.exp(gamma * np.log(np.where(zstar > 0, zstar, 1.0)) - tau * zstar**beta), 1.0)
    z = np.exp(rng.uniform(-8, 4, 10_000))
    sampled = np.exp(gamma * np.log(z) - tau * z**beta)
    violations = int(np.sum(sampled > env * (1 + 1e-12))) + int(np.sum(np.abs(at_star / env - 1) > 1e-12))
    spot = [sup_power_exp(float(g), float(t), float(b)) / float(e) - 1
            for g, t, b, e in zip(gamma[:50], tau[:50], beta[:50], env[:50])]
    roots_bad = 0
    for ax, bx, cx, k in zip(rng.uniform(0, 50, 1000), rng.uniform(0, 50, 1000), rng.uniform(0, 50, 1000),
                             rng.uniform(2.05, 12, 1000)):
        B = x_root_bound(ax, bx, cx, k)
        roots_bad += largest_root(ax, bx, cx, k) > B + 1e-9
    elapsed = time.perf_counter() - t0
    print(f"criterion 7: envelope violations {violations}, root violations {roots_bad}, {elapsed:.2f} s")
    assert violations == 0 and roots_bad == 0
    assert max(abs(x) for x in spot) <= 1e-8
    assert elapsed <= 5.0


@pytest.mark.acceptance(8, "theorem shape: stable C_fit in both regimes; wrong-regime negative control")
def test_criterion_8_theorem_shape(run032, config_dir, tmp_path, example_field):
    rep, elapsed032 = run032
    v1 = rep.stages["bounds"].data["verdict"]
    cfg2 = ExperimentConfig.load(config_dir / "example_0_2_6.json")
    t0 = time.perf_counter()
    rep2 = run_experiment(cfg2, tmp_path, stages=("certify", "solve", "bounds"), refine=2)
    elapsed026 = time.perf_counter() - t0
    v2 = rep2.stages["bounds"].data["verdict"]
    # negative control: the regime 2 exponents forced onto the regime 1 configuration
    R = rep.stages["solve"].data["R"]
    grid = SpaceTimeGrid(1, R, 513, 0.0, 1.0, 512)
    coarse = solve_kernel_slice(example_field, 1.0, [0.0], SolverConfig(), grid)
    fine = solve_kernel_slice(example_field, 1.0, [0.0], SolverConfig(), grid.refined(2))
    wrong = verify_theorem_bound(coarse, select_regime(0, 3, 2, force=2), 2.5, 0.1, 4, refined=fine,
                                 check_parameters=False)
    print(f"criterion 8: regime 1 C_fit {v1['C_fit']:.5g} change {v1['change']:.3g} ({elapsed032:.1f} s); "
          f"regime 2 C_fit {v2['C_fit']:.5g} change {v2['change']:.3g} ({elapsed026:.1f} s); "
          f"forced wrong regime change {wrong.change:.3g}")
    assert v1["regime"] == 1 and math.isfinite(v1["C_fit"]) and v1["change"] <= 0.25
    assert v2["regime"] == 2 and math.isfinite(v2["C_fit"]) and v2["change"] <= 0.25
    assert elapsed032 <= 180 and elapsed026 <= 180
    assert wrong.change > 0.5


@pytest.mark.acceptance(9, "approximation levels e^2, e^4, e^8 on (1,3,2): decreasing, <= 5% at top")
def test_criterion_9_approximation(config_dir, tmp_path):
    cfg = ExperimentConfig.load(config_dir / "example_1_3_2.json")
    rep = run_experiment(cfg, tmp_path, stages=("certify", "solve", "approximation"))
    data = rep.stages["approximation"].data
    levels = [r["n"] for r in data["rows"]]
    assert levels == pytest.approx([E2, E4, E8])
    assert data["strictly_decreasing"]
    assert data["top_level_relative"] <= 0.05
    cutoff = build_cutoff_profile(cfg.approximation.mu)
    t = np.linspace(0.0, 2.5, 10_000)
    assert float(np.max(np.abs(cutoff.t_derivative(t)))) <= 2.0
    assert rep.stages["approximation"].status == "pass"


@pytest.mark.acceptance(10, "exact identities: remap tuple, thm45 - thm34 difference, gamma table")
def test_criterion_10_identities():
    rng = np.random.default_rng(10)
    for cs in rng.uniform(1, 100, (100, 6)):
        c2, c3, c5, c8, c9, eta = cs
        assert remap_constants(c2, c3, c5, c8, c9, eta) == (2 * c2, c3 + eta * c8, c5 + 4 * c9)
    window = TimeWindow(0.2, 0.3, 0.6, 0.75)
    for _ in range(100):
        c = {f"c{i}": float(v) for i, v in enumerate(rng.uniform(1, 10, 9), start=1)}
        k = float(rng.uniform(3.1, 8))
        S, I1, I2 = rng.uniform(0, 5, 3)
        ws = WeightSystem(k, (0.05, 0.1, 0.15), 0.2, 2.5, 4.0, window, constants=c)
        b45, b34 = assemble_main_bound(ws, S, I1, I2, "thm45"), assemble_main_bound(ws, S, I1, I2, "thm34")
        # exact up to the rounding of the two assembled totals (a few ulp of thm45)
        ulp = np.spacing(b45)
        assert abs((b45 - b34) - (c["c8"] ** (k / 2) * I1 + c["c9"] ** k * I2)) <= 8 * ulp
    g = weight_exponents(0, 3, 2, 2.5, 4.0)
    assert tuple(g[f"c{i}"] for i in range(2, 8)) == (0, 0, 1, 0, 1.875, 0.625)
