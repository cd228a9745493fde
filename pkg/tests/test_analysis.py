import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spephot.analysis import (
    EmitterReport,
    PowerSeriesPoint,
    UnderdeterminedError,
    VisibilityResult,
    build_report,
    derive_lifetimes,
    dipole_misalignment,
    ensemble_stats,
    extract_rates,
    initial_rates,
    linewidth_ratio,
    predict_series,
    shelving_ratio,
    synthetic_series,
    visibility,
    visibility_from_fit,
    _rates_and_jacobian,
)
from spephot.fitting import PolarizationParams
from spephot.kinetics import RateModel, analytic_g2, rates_at_power, saturation_parameters

E1 = RateModel(k21=0.678, k23=0.127, k31_0=0.024, alpha=9.27e-4, beta=0.0)
E2 = RateModel(k21=0.268, k23=0.046, k31_0=0.021, alpha=3.31e-4, beta=3.29e-5)
E3 = RateModel(k21=1.039, k23=0.521, k31_0=0.043, alpha=1.65e-4, beta=3.49e-4)
NAMES = ("k21", "k23", "k31_0", "alpha", "beta")


def psat(model):
    return saturation_parameters(RateModel(model.k21, model.k23, model.k31_0, model.alpha, 0.0), 1.0)[1]


def mode_of(model):
    return "power-dependent" if model.beta > 0 else "power-independent"


class TestForwardModel:
    def test_matches_analytic_g2(self):
        powers = [100.0, 700.0, 3000.0]
        pred = predict_series(E3, powers)
        for i, P in enumerate(powers):
            g = analytic_g2(rates_at_power(E3, P))
            assert pred["lambda1"][i] == pytest.approx(g.lambda1, rel=1e-12)
            assert pred["lambda2"][i] == pytest.approx(g.lambda2, rel=1e-12)
            assert pred["a"][i] == pytest.approx(g.a, rel=1e-12)

    def test_jacobian_finite_difference(self):
        th = np.array([0.268, 0.046, 0.021, 3.31e-4, 3.29e-5])
        P = np.array([300.0, 1000.0, 3000.0])
        _, J = _rates_and_jacobian(th, P)
        for k, name in enumerate(NAMES):
            h = th[k] * 1e-6
            up, dn = th.copy(), th.copy()
            up[k] += h
            dn[k] -= h
            vu, _ = _rates_and_jacobian(up, P)
            vd, _ = _rates_and_jacobian(dn, P)
            for i in range(3):
                fd = (np.asarray(vu[i]) - np.asarray(vd[i])) / (2 * h)
                np.testing.assert_allclose(J[name][i], fd, rtol=1e-4)

    def test_initial_rates_exact_on_noiseless(self):
        series = synthetic_series(E2, psat(E2) * np.geomspace(0.1, 30, 6))
        init = initial_rates(series)
        for k in NAMES:
            assert init[k] == pytest.approx(getattr(E2, k), rel=1e-8)


class TestExtractRates:
    @pytest.mark.parametrize("model", [E1, E2, E3])
    def test_noiseless_six_powers(self, model):
        series = synthetic_series(model, psat(model) * np.geomspace(0.1, 30, 6))
        fitted, res = extract_rates(series, mode_of(model))
        assert res.converged
        for k in NAMES:
            if getattr(model, k) > 0:
                assert getattr(fitted, k) == pytest.approx(getattr(model, k), rel=1e-4)
        assert fitted.beta == model.beta or model.beta > 0

    def test_noisy_median_e2(self):
        powers = psat(E2) * np.geomspace(0.1, 30, 8)
        errs = []
        for seed in range(100):
            fitted, _ = extract_rates(synthetic_series(E2, powers, 0.05, seed), "power-dependent")
            errs.append([abs(getattr(fitted, k) / getattr(E2, k) - 1) for k in NAMES])
        assert np.all(np.median(errs, axis=0) < 0.2)

    def test_from_g2_fit_points(self):
        # PowerSeriesPoint built from (a, tau1, tau2) reproduces decay rates
        g = analytic_g2(rates_at_power(E1, 500.0))
        p = PowerSeriesPoint(500.0, g.lambda1, g.lambda2, g.a)
        assert 1 / p.lambda1 == pytest.approx(g.tau1)

    def test_order_invariance(self):
        series = synthetic_series(E3, psat(E3) * np.geomspace(0.1, 30, 6), 0.03, seed=1)
        a, _ = extract_rates(series, "power-dependent")
        b, _ = extract_rates(series[::-1], "power-dependent")
        for k in NAMES:
            assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-10)

    def test_two_powers_underdetermined(self):
        series = synthetic_series(E2, [100.0, 1000.0])
        with pytest.raises(UnderdeterminedError):
            extract_rates(series, "power-dependent")

    def test_duplicate_powers(self):
        series = synthetic_series(E2, [100.0, 100.0, 1000.0])
        with pytest.raises(ValueError):
            extract_rates(series)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            extract_rates(synthetic_series(E2, [1.0, 2.0, 3.0]), "sometimes")

    def test_auto_selects_beta_when_present(self):
        powers = psat(E3) * np.geomspace(0.1, 30, 8)
        _, res = extract_rates(synthetic_series(E3, powers, 0.01, seed=2), "auto")
        assert res.meta["shelving_mode"] == "power-dependent"
        assert res.meta["auto_selection"]["p_value"] < 0.05

    def test_auto_drops_beta_when_absent(self):
        powers = psat(E1) * np.geomspace(0.1, 30, 8)
        picks = [extract_rates(synthetic_series(E1, powers, 0.02, seed=s), "auto")[1].meta["shelving_mode"]
                 for s in range(20)]
        assert picks.count("power-independent") >= 15

    def test_point_validation(self):
        with pytest.raises(ValueError):
            PowerSeriesPoint(0.0, 1.0, 0.1, 0.5)
        with pytest.raises(ValueError):
            PowerSeriesPoint(10.0, 0.1, 1.0, 0.5)


class TestLifetimes:
    @pytest.mark.parametrize("model,expected", [(E1, (1.2, 41.7)), (E2, (3.2, 47.6)), (E3, (0.6, 23.3))])
    def test_printed_precision(self, model, expected):
        t2, t3 = derive_lifetimes(model)
        assert (round(t2, 1), round(t3, 1)) == expected

    @pytest.mark.parametrize("model", [E1, E2, E3])
    def test_shelving_ratio_envelope(self, model):
        # printed two-significant-figure precision of the ratio
        assert 2 <= float(f"{shelving_ratio(model):.2g}") <= 40

    def test_linewidth_ratio(self):
        assert linewidth_ratio(1.6, 1.6) == pytest.approx(3.89e3, rel=2e-3)
        with pytest.raises(ValueError):
            linewidth_ratio(0.0, 1.6)


class TestVisibility:
    def test_identities(self):
        assert visibility(5.0, 0.0) == 1.0
        assert visibility(3.0, 3.0) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-3, 1e6), st.one_of(st.just(0.0), st.floats(1e-3, 1e6)), st.floats(1e-6, 1e6))
    def test_scale_invariance(self, x, y, c):
        hi, lo = max(x, y), min(x, y)
        assert visibility(c * hi, c * lo) == pytest.approx(visibility(hi, lo), abs=1e-12)

    def test_from_fit(self):
        v = visibility_from_fit(PolarizationParams(a=0.21 / 1.58, b=1.0, phi0=220.0))
        assert v.visibility == pytest.approx(0.79)
        assert v.axis_angle == pytest.approx(40.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            visibility(1.0, 2.0)
        with pytest.raises(ValueError):
            visibility(0.0, 0.0)
        with pytest.raises(ValueError):
            VisibilityResult(0.5, 1.0, 2.0, 0.0)


class TestMisalignment:
    def test_examples(self):
        assert dipole_misalignment(140.0, 40.0) == 100.0
        assert dipole_misalignment(140.0, 40.0, "folded") == -80.0
        assert dipole_misalignment(170.0, 10.0, "folded") == pytest.approx(-20.0)
        assert dipole_misalignment(10.0, 190.0) == 180.0

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-720, 720), st.floats(-720, 720), st.integers(-3, 3))
    def test_wrap_invariants(self, a, e, k):
        raw = dipole_misalignment(a, e)
        fold = dipole_misalignment(a, e, "folded")
        assert -180 < raw <= 180 and -90 < fold <= 90
        assert dipole_misalignment(a + 360 * k, e) == pytest.approx(raw, abs=1e-9)
        assert dipole_misalignment(a + 180 * k, e, "folded") == pytest.approx(fold, abs=1e-9)
        assert ((raw - (a - e)) / 360) == pytest.approx(round((raw - (a - e)) / 360), abs=1e-9)

    def test_bad_convention(self):
        with pytest.raises(ValueError):
            dipole_misalignment(1.0, 2.0, "mod")


class TestEnsembleStats:
    def test_synthetic_draws(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            v = rng.normal(1.869, 0.064, 19)
            s = ensemble_stats(v, 0.02)
            assert s.mean == pytest.approx(v.mean(), rel=1e-14)
            assert s.std == pytest.approx(np.std(v, ddof=1), rel=1e-14)
            assert s.counts.sum() == 19
            assert np.all(np.isclose(s.edges / 0.02, np.round(s.edges / 0.02)))

    def test_sampling_tolerance(self):
        rng = np.random.default_rng(1)
        means = [ensemble_stats(rng.normal(1.869, 0.064, 19), 0.02).mean for _ in range(2000)]
        assert np.std(means) == pytest.approx(0.064 / np.sqrt(19), rel=0.05)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ensemble_stats([1.0], 0.1)
        with pytest.raises(ValueError):
            ensemble_stats([1.0, 2.0], 0.0)


class TestReport:
    def test_roundtrip_json(self):
        series = [{"power": 50.0, "a": 1.44, "tau1": 1.29, "tau2": 118.0}]
        rep = build_report("E1", E1, g2_series=series, zpl_energy=1.796, fwhm=1.6,
                           measured_lifetime=1.6,
                           absorption=PolarizationParams(1.0, 1.03, 140.0),
                           emission=PolarizationParams(0.133, 1.0, 40.0))
        text = json.dumps(rep.to_dict())
        back = EmitterReport.from_dict(json.loads(text))
        assert back == rep
        assert rep.misalignment == 100.0
        assert rep.gamma_source == "measured_lifetime"
        assert rep.linewidth_ratio == pytest.approx(3.89e3, rel=2e-3)

    def test_absent_blocks(self):
        rep = build_report("X")
        d = rep.to_dict()
        assert d["rate_model"] is None and d["absorption"] is None and d["misalignment"] is None

    def test_lifetime_consistency(self):
        t2, t3 = derive_lifetimes(E2)
        build_report("E2", E2, lifetimes=(t2, t3))
        with pytest.raises(ValueError):
            build_report("E2", E2, lifetimes=(t2 * 1.01, t3))

    def test_mode_consistency(self):
        with pytest.raises(ValueError):
            build_report("E2", E2, shelving_mode="power-independent")
        assert build_report("E1", E1).shelving_mode == "power-independent"
