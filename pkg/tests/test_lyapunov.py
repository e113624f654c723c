import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kolmokernel.lyapunov import (StaticCertificate, TimeDependentLyapunov, build_time_dependent_W,
                                  check_domination, check_static_certificate, check_time_dependent,
                                  default_time_samples, derive_h, leading_terms, merge_reports,
                                  sample_points)
from kolmokernel.operators import apply_operator, build_example_operator, constant_field

from oracles import power_integral


@pytest.fixture(scope="module")
def W032():
    return build_time_dependent_W(0, 3, 2, "i", 0.1, 0.2, 2.5)


@pytest.fixture(scope="module")
def td_samples():
    return sample_points(1, 4.0, default_time_samples(1.0, 64), n_axis=129)


class TestStaticCertificate:
    def test_small_delta_passes_with_finite_m(self):
        f = build_example_operator(0, 3, 2)
        rep = check_static_certificate(f, StaticCertificate(0.12, 4.0), sample_points(1, 8.0, [0.0, 0.5, 1.0]))
        assert rep.passed
        assert math.isfinite(rep.details["M"]) and rep.details["M"] > 0

    def test_delta_beta_above_one_fails_asymptotically(self):
        f = build_example_operator(0, 3, 2)
        rep = check_static_certificate(f, StaticCertificate(0.3, 4.0), sample_points(1, 8.0, [0.0, 1.0]))
        assert not rep.passed
        assert any("negative leading coefficient violated" in n for n in rep.notes)

    def test_ratio_matches_apply_operator(self, rng):
        f = build_example_operator(1, 3, 2)
        cert = StaticCertificate(0.1, 3.0)
        x = rng.uniform(-2.5, 2.5, (40, 1))
        direct = apply_operator(f, cert.Z, 0.0, x) / cert.value(x)
        np.testing.assert_allclose(cert.generator_ratio(f, 0.0, x, "full"), direct, rtol=1e-10, atol=1e-10)

    def test_laplacian_with_gaussian_growth_fails_but_reports_margin(self):
        rep = check_static_certificate(constant_field(1), StaticCertificate(0.05, 2.0),
                                       sample_points(1, 4.0, [0.0]))
        assert not rep.passed
        assert math.isfinite(rep.worst_margin)
        assert rep.details["asymptotic"]["passed"] is False

    def test_leading_coefficient_doubles_for_m_zero(self):
        # (1 + |x|^0) = 2 doubles the second-order term: 2 (delta beta)^2 - delta beta
        terms = leading_terms(build_example_operator(0, 3, 2), 0.2, 4.0, "full")
        assert terms[max(terms)] == pytest.approx(2 * 0.8**2 - 0.8)

    def test_report_json_fields(self):
        rep = check_static_certificate(build_example_operator(0, 3, 2), StaticCertificate(0.12, 4.0),
                                       sample_points(1, 4.0, [0.0], n_random=10))
        assert set(rep.to_dict()) >= {"pass", "worst_margin", "argmin", "n_samples"}

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            StaticCertificate(0.0, 4.0)
        with pytest.raises(ValueError):
            StaticCertificate(0.1, 4.0, target="B")


class TestBuildW:
    def test_alpha_threshold_case_i(self):
        W = build_time_dependent_W(0, 3, 2, "i", 0.1, 0.2, 2.5)
        assert W.beta == 4.0
        with pytest.raises(ValueError, match="alpha > alpha_0"):
            build_time_dependent_W(0, 3, 2, "i", 0.1, 0.2, 2.0)

    def test_case_ii_beta(self):
        W = build_time_dependent_W(0, 2, 6, "ii", 0.1, 0.2, 2.5)
        assert W.beta == 4.0
        with pytest.raises(ValueError, match="alpha > alpha_0"):
            build_time_dependent_W(0, 2, 6, "ii", 0.1, 0.2, 2.0)

    @pytest.mark.parametrize("kw,msg", [({"eps": 0.25}, "eps < delta"), ({"delta": 0.3}, "delta < 1/beta"),
                                        ({"case": "iii"}, "case")])
    def test_constraint_named(self, kw, msg):
        args = dict(m=0, p=3, r=2, case="i", eps=0.1, delta=0.2, alpha=2.5)
        args.update(kw)
        with pytest.raises(ValueError, match=msg):
            build_time_dependent_W(**args)


class TestDeriveH:
    def test_exponent_case_one(self):
        _, e_h = derive_h(0.1, 0.2, 2.5, 4.0, 0.0, 3.0)
        assert e_h == pytest.approx(-0.5)

    def test_exponent_tends_to_minus_one(self):
        _, e_h = derive_h(0.1, 0.2, 2.0 + 1e-9, 4.0, 0.0, 3.0)
        assert e_h == pytest.approx(-1.0, abs=1e-8)
        assert e_h > -1

    def test_second_branch_keeps_constant(self):
        # m + beta - 2 <= 0: beta = 1, m = 0
        coeff, e_h = derive_h(0.1, 0.5, 2.0, 1.0, 0.0, 2.0, d=3)
        c = (2.0 + 2.0) ** 1.0
        assert e_h == pytest.approx(2.0 - 1 - 1.0)
        assert coeff == pytest.approx(0.1 * c * 4.0 + 2.0 * 2.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 0.9))
    def test_h_integral_matches_quadrature(self, s0):
        W = build_time_dependent_W(0, 3, 2, "i", 0.1, 0.2, 2.5)
        closed = float(W.h_integral(s0))
        ref = power_integral(W.h_coeff, W.h_exp, 0.0, 1.0 - s0)
        assert closed == pytest.approx(ref, rel=1e-8)


class TestTimeDependent:
    def test_example_passes(self, W032, td_samples):
        f = build_example_operator(0, 3, 2)
        rep = check_time_dependent(f, W032, td_samples)
        assert rep.passed and rep.worst_margin >= -1e-8
        assert rep.n_samples == 64 * 129 + 1000

    def test_constant_W_passes_trivially(self, td_samples):
        W = TimeDependentLyapunov(1.0, 0.0, 2.5, 4.0)
        assert check_time_dependent(build_example_operator(0, 3, 2), W, td_samples).passed

    def test_zero_rate_fails(self, W032, td_samples):
        rep = check_time_dependent(build_example_operator(0, 3, 2), W032.with_rate(0.0), td_samples)
        assert not rep.passed

    def test_terminal_samples_rejected(self, W032):
        with pytest.raises(ValueError, match="s >= t"):
            check_time_dependent(build_example_operator(0, 3, 2), W032, (np.array([1.0]), np.zeros((1, 1))))

    def test_domination(self, W032, td_samples):
        rep = check_domination(W032, td_samples)
        assert rep.passed

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 0.99), st.floats(-5, 5), st.floats(0.01, 0.19))
    def test_monotone_in_eps_and_tau(self, s, x, eps):
        W = TimeDependentLyapunov(1.0, eps, 2.5, 4.0)
        pts = np.array([[x]])
        bigger = TimeDependentLyapunov(1.0, eps + 0.01, 2.5, 4.0)
        assert bigger.log_value(s, pts)[0] >= W.log_value(s, pts)[0]
        assert W.log_value(max(s - 0.01, 0.0), pts)[0] >= W.log_value(s, pts)[0]
        assert W.value(1.0, pts)[0] == 1.0

    def test_merge_reports_takes_minimum(self, W032, td_samples):
        f = build_example_operator(0, 3, 2)
        s, pts = td_samples
        half = len(s) // 2
        a = check_time_dependent(f, W032, (s[:half], pts[:half]))
        b = check_time_dependent(f, W032, (s[half:], pts[half:]))
        full = check_time_dependent(f, W032, td_samples)
        merged = merge_reports([a, b])
        assert merged.worst_margin == pytest.approx(full.worst_margin)
        assert merged.n_samples == full.n_samples

    def test_sampling_is_seeded(self):
        a = sample_points(2, 3.0, [0.0, 0.5], n_axis=5, n_random=20, seed=7)
        b = sample_points(2, 3.0, [0.0, 0.5], n_axis=5, n_random=20, seed=7)
        np.testing.assert_array_equal(a[1], b[1])
