import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from spephot.kinetics import (
    DegenerateSpectrumError,
    G2Params,
    InstantRates,
    RateModel,
    analytic_g2,
    eval_g2,
    excited_state_lifetime,
    generator_matrix,
    metastable_lifetime,
    predicted_intensity,
    rates_at_power,
    rates_from_g2,
    saturation_parameters,
    steady_state,
    transform_limited_linewidth,
)

E1 = RateModel(k21=0.678, k23=0.127, k31_0=0.024, alpha=9.27e-4, beta=0.0)
E2 = RateModel(k21=0.268, k23=0.046, k31_0=0.021, alpha=3.31e-4, beta=3.29e-5)
E3 = RateModel(k21=1.039, k23=0.521, k31_0=0.043, alpha=1.65e-4, beta=3.49e-4)


def g2_matrix_exponential(rates, lags):
    """Independent oracle: propagate p(0) = |1> with expm(Q t)."""
    q = generator_matrix(rates)
    w, v = np.linalg.eig(q)
    null = np.real(v[:, np.argmin(np.abs(w))])
    p_inf = null / null.sum()
    out = []
    for t in lags:
        p = expm(q * t) @ np.array([1.0, 0.0, 0.0])
        out.append(p[1] / p_inf[1])
    return np.array(out)


def rk4_populations(rates, p0, t_end, dt=0.05):
    q = generator_matrix(rates)
    p = np.array(p0, dtype=float)
    for _ in range(int(round(t_end / dt))):
        k1 = q @ p
        k2 = q @ (p + 0.5 * dt * k1)
        k3 = q @ (p + 0.5 * dt * k2)
        k4 = q @ (p + dt * k3)
        p = p + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


# metastable regime: k31 < k21 keeps the spectrum real and k31 below lambda1
metastable_rates = st.builds(
    lambda k12, k21, k23, frac: InstantRates(k12=k12, k21=k21, k23=k23,
                                             k31=frac * k21),
    st.floats(0.01, 5.0), st.floats(0.05, 5.0), st.floats(0.001, 2.0), st.floats(0.002, 0.3),
)


class TestRatesAtPower:
    def test_e1_table_row(self):
        r = rates_at_power(E1, 1000.0)
        assert r.k12 == pytest.approx(0.927)
        assert r.k31 == pytest.approx(0.024)
        assert (r.k21, r.k23) == (0.678, 0.127)

    def test_zero_power(self):
        r = rates_at_power(E3, 0.0)
        assert r.k12 == 0.0 and r.k31 == E3.k31_0

    def test_e3_power_dependent_deshelving(self):
        assert rates_at_power(E3, 1000.0).k31 == pytest.approx(0.043 * 1.349)

    def test_negative_power(self):
        with pytest.raises(ValueError):
            rates_at_power(E1, -1.0)

    def test_model_invariants(self):
        with pytest.raises(ValueError):
            RateModel(k21=0.0, k23=0.1, k31_0=0.1, alpha=1e-3)
        with pytest.raises(ValueError):
            RateModel(k21=1.0, k23=-0.1, k31_0=0.1, alpha=1e-3)


class TestSteadyState:
    def test_two_level_symmetric(self):
        p = steady_state(InstantRates(k12=0.5, k21=0.5, k23=0.0, k31=0.1))
        assert p.p2 == pytest.approx(0.5) and p.p3 == 0.0

    def test_saturation_limit(self):
        p = steady_state(InstantRates(k12=1e9, k21=0.5, k23=0.0, k31=0.1))
        assert p.p2 == pytest.approx(1.0, abs=1e-8)

    def test_matches_formula(self):
        r = rates_at_power(E2, 700.0)
        p = steady_state(r)
        expected = r.k12 * r.k31 / (r.k31 * (r.k12 + r.k21 + r.k23) + r.k12 * r.k23)
        assert p.p2 == pytest.approx(expected, rel=1e-14)
        assert p.p1 + p.p2 + p.p3 == pytest.approx(1.0, abs=1e-12)

    def test_e2_against_long_time_ode(self):
        r = rates_at_power(E2, 1000.0)
        p_ode = rk4_populations(r, [1.0, 0.0, 0.0], t_end=1e4)
        np.testing.assert_allclose(steady_state(r).as_array(), p_ode, atol=1e-10)

    @pytest.mark.parametrize("corner", [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    def test_limit_from_simplex_corners(self, corner):
        r = rates_at_power(E3, 2000.0)
        p = expm(generator_matrix(r) * 1e4) @ np.array(corner, dtype=float)
        np.testing.assert_allclose(steady_state(r).as_array(), p, atol=1e-10)

    def test_shelving_trap_is_error(self):
        with pytest.raises(ValueError):
            steady_state(InstantRates(k12=1.0, k21=1.0, k23=0.1, k31=0.0))


class TestAnalyticG2:
    def test_two_level_limit(self):
        r = InstantRates(k12=0.4, k21=0.6, k23=0.0, k31=0.05)
        g = analytic_g2(r)
        assert g.a == 0.0
        assert g.lambda1 == pytest.approx(1.0)

    def test_e1_matches_matrix_exponential(self):
        r = rates_at_power(E1, 1000.0)
        assert r.k12 == pytest.approx(0.927)
        lags = np.logspace(-2, 3.5, 200)
        g = analytic_g2(r)
        np.testing.assert_allclose(eval_g2(g, lags), g2_matrix_exponential(r, lags), atol=1e-8)

    def test_degenerate_spectrum(self):
        # (s - k31)^2 == 4 k12 k23 -> coincident eigenvalues
        r = InstantRates(k12=1.0, k21=0.0 + 1.0, k23=1.0, k31=1.0)
        with pytest.raises(DegenerateSpectrumError):
            analytic_g2(r)

    def test_non_metastable_rejected(self):
        with pytest.raises(ValueError):
            analytic_g2(InstantRates(k12=0.1, k21=0.1, k23=0.1, k31=5.0))

    @settings(max_examples=300, deadline=None)
    @given(metastable_rates)
    def test_boundary_identities(self, r):
        g = analytic_g2(r)
        assert abs(eval_g2(g, 0.0)) < 1e-10
        assert abs(eval_g2(g, 1e6 * g.tau2) - 1.0) < 1e-10

    @settings(max_examples=300, deadline=None)
    @given(metastable_rates)
    def test_trace_and_determinant(self, r):
        g = analytic_g2(r)
        l1, l2 = g.lambda1, g.lambda2
        assert l1 >= l2 > 0
        if r.k23 > 0:
            assert l1 + l2 == pytest.approx(r.k12 + r.k21 + r.k23 + r.k31, rel=1e-10)
            assert l1 * l2 == pytest.approx(r.k31 * (r.k12 + r.k21 + r.k23) + r.k12 * r.k23, rel=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(metastable_rates)
    def test_bunching_zero_iff_no_shelving(self, r):
        g = analytic_g2(r)
        assert (g.a == 0) == (r.k23 == 0)

    def test_matrix_exponential_oracle_randomized(self):
        rng = np.random.default_rng(20240611)
        lags = np.logspace(-2, 4, 200)
        worst = 0.0
        for _ in range(1000):
            k12, k21 = rng.uniform(0.01, 5.0, 2)
            k23 = rng.uniform(0.001, 2.0)
            k31 = rng.uniform(0.002, 0.3) * k21
            r = InstantRates(k12, k21, k23, k31)
            q = generator_matrix(r)
            p_inf = steady_state(r).p2
            # batch expm via eigendecomposition of the generator
            w, v = np.linalg.eig(q)
            c = np.linalg.solve(v, np.array([1.0, 0.0, 0.0]))
            p2 = np.real((v[1] * c)[None, :] * np.exp(np.outer(lags, w))).sum(axis=1)
            worst = max(worst, np.max(np.abs(eval_g2(analytic_g2(r), lags) - p2 / p_inf)))
        assert worst < 1e-8

    def test_rates_from_g2_roundtrip(self):
        for a, t1, t2 in [(1.44, 1.29, 118.0), (1.71, 1.55, 73.2), (0.12, 0.76, 35.3)]:
            target = G2Params(a, t1, t2)
            lam_sum = target.lambda1 + target.lambda2
            r = rates_from_g2(target, k12=0.4 * lam_sum)
            g = analytic_g2(r)
            assert g.a == pytest.approx(a, rel=1e-10)
            assert g.tau1 == pytest.approx(t1, rel=1e-10)
            assert g.tau2 == pytest.approx(t2, rel=1e-10)


class TestEvalG2:
    def test_zero_lag(self):
        assert eval_g2(G2Params(1.44, 1.29, 118.0), 0.0) == 0.0

    def test_long_lag(self):
        assert eval_g2(G2Params(1.44, 1.29, 118.0), 1e7) == pytest.approx(1.0, abs=1e-15)

    def test_e3_at_5ns(self):
        expected = 1 - 1.12 * math.exp(-5 / 0.76) + 0.12 * math.exp(-5 / 35.3)
        assert eval_g2(G2Params(0.12, 0.76, 35.3), 5.0) == pytest.approx(expected, rel=1e-15)

    def test_even(self):
        p = G2Params(1.71, 1.55, 73.2)
        lags = np.linspace(0, 300, 31)
        np.testing.assert_array_equal(eval_g2(p, lags), eval_g2(p, -lags))

    def test_params_invariants(self):
        with pytest.raises(ValueError):
            G2Params(1.0, 5.0, 2.0)
        with pytest.raises(ValueError):
            G2Params(-0.1, 1.0, 2.0)


class TestLifetimes:
    @pytest.mark.parametrize("model,tau2,tau3", [
        (E1, 1.242, 41.67), (E2, 3.185, 47.62), (E3, 0.641, 23.26),
    ])
    def test_table3(self, model, tau2, tau3):
        assert excited_state_lifetime(model) == pytest.approx(tau2, abs=5e-4)
        assert metastable_lifetime(model) == pytest.approx(tau3, abs=5e-3)

    def test_metastable_zero_rate(self):
        with pytest.raises(ValueError):
            metastable_lifetime(RateModel(k21=1.0, k23=0.0, k31_0=0.0, alpha=1e-3))

    @pytest.mark.parametrize("tau,gamma", [(1.6, 0.411), (2.7, 0.244), (2.0, 0.329)])
    def test_transform_limit(self, tau, gamma):
        assert transform_limited_linewidth(tau) == pytest.approx(gamma, abs=5e-4)

    def test_transform_limit_domain(self):
        with pytest.raises(ValueError):
            transform_limited_linewidth(0.0)


class TestPredictedIntensity:
    def test_zero_power(self):
        assert predicted_intensity(E2, 0.0, 0.1) == 0.0

    def test_linear_in_efficiency(self):
        p = np.linspace(0, 5000, 11)
        np.testing.assert_allclose(predicted_intensity(E3, p, 0.2), 2 * predicted_intensity(E3, p, 0.1))

    def test_monotone_and_bounded(self):
        p = np.linspace(0, 1e5, 2001)
        i = predicted_intensity(E3, p, 0.05)
        assert np.all(np.diff(i) > 0)
        assert i[-1] < 0.05 * E3.k21 * 1e9

    def test_beta_zero_is_hyperbola(self):
        i_inf, p_sat = saturation_parameters(E1, 0.01)
        # closed-form oracle straight from the stationary populations
        r = rates_at_power(E1, p_sat)
        assert 0.01 * E1.k21 * steady_state(r).p2 * 1e9 == pytest.approx(i_inf / 2, rel=1e-12)
        p = np.linspace(1, 1e4, 50)
        np.testing.assert_allclose(predicted_intensity(E1, p, 0.01), i_inf * p / (p + p_sat), rtol=1e-12)
