"""Per-emitter analysis: rate inversion, polarization contrast, ensemble statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .fitting import FitResult, PolarizationParams, _solve
from .kinetics import (
    RateModel,
    decay_rates,
    excited_state_lifetime,
    metastable_lifetime,
    transform_limited_linewidth,
)

SHELVING_MODES = ("power-independent", "power-dependent", "auto")


class UnderdeterminedError(ValueError):
    """Not enough power points to constrain the rate model."""


@dataclass(frozen=True)
class PowerSeriesPoint:
    power: float
    lambda1: float
    lambda2: float
    a: float
    sigma_lambda1: float = float("nan")
    sigma_lambda2: float = float("nan")
    sigma_a: float = float("nan")

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("power must be > 0")
        if not self.lambda1 >= self.lambda2 > 0:
            raise ValueError("need lambda1 >= lambda2 > 0")

    @classmethod
    def from_g2_fit(cls, power: float, fit: FitResult) -> "PowerSeriesPoint":
        """Convert fitted (a, tau1, tau2) to decay rates with propagated errors."""
        p, u = fit.params, fit.uncertainties
        return cls(power=power, lambda1=1 / p["tau1"], lambda2=1 / p["tau2"], a=p["a"],
                   sigma_lambda1=u["tau1"] / p["tau1"] ** 2,
                   sigma_lambda2=u["tau2"] / p["tau2"] ** 2, sigma_a=u["a"])


def _rates_and_jacobian(theta, power):
    """Predicted (lambda1, lambda2, a) per power and d/d(k21, k23, k31_0, alpha, beta)."""
    k21, k23, k31_0, alpha, beta = theta
    P = power
    k12 = alpha * P
    k31 = k31_0 * (1 + beta * P)
    lam1, lam2, a = decay_rates(k12, k21, k23, k31)
    s = k12 + k21 + k23
    R = lam1 - lam2
    u = s - k31
    # derivatives of the discriminant root w.r.t. (k12, k21, k23, k31)
    dR = [(2 * u - 4 * k23) / (2 * R), (2 * u) / (2 * R), (2 * u - 4 * k12) / (2 * R), (-2 * u) / (2 * R)]
    dlam1 = [(1 + d) / 2 for d in dR]
    dlam2 = [(1 - d) / 2 for d in dR]
    N = lam1 * (lam2 - k31)
    M = k31 * R
    dk31 = [0.0, 0.0, 0.0, 1.0]
    da = []
    for i in range(4):
        dN = dlam1[i] * (lam2 - k31) + lam1 * (dlam2[i] - dk31[i])
        dM = dk31[i] * R + k31 * dR[i]
        da.append((dN * M - N * dM) / M ** 2)
    # chain to model parameters: k12 = alpha P, k31 = k31_0 (1 + beta P)
    one = np.ones_like(P)
    chain = {  # d(k12, k21, k23, k31) / d param
        "k21": (0 * P, one, 0 * P, 0 * P),
        "k23": (0 * P, 0 * P, one, 0 * P),
        "k31_0": (0 * P, 0 * P, 0 * P, 1 + beta * P),
        "alpha": (P, 0 * P, 0 * P, 0 * P),
        "beta": (0 * P, 0 * P, 0 * P, k31_0 * P),
    }
    J = {}
    for name, g in chain.items():
        J[name] = tuple(sum(d[i] * g[i] for i in range(4)) for d in (dlam1, dlam2, da))
    return (lam1, lam2, a), J


def predict_series(model: RateModel, powers) -> dict:
    """Forward model: lambda1, lambda2, a at each power."""
    P = np.asarray(powers, dtype=float)
    lam1, lam2, a = decay_rates(model.alpha * P, model.k21, model.k23, model.k31_0 * (1 + model.beta * P))
    return {"power": P, "lambda1": lam1, "lambda2": lam2, "a": a}


def synthetic_series(model: RateModel, powers, rel_noise: float = 0.0, seed=None) -> list[PowerSeriesPoint]:
    """Series of PowerSeriesPoint from the forward model, optionally with
    multiplicative Gaussian noise; uncertainties are set to ``rel_noise`` times the
    noiseless value (or 1e-3 relative when noiseless)."""
    pred = predict_series(model, powers)
    rng = np.random.default_rng(seed)
    rel = rel_noise if rel_noise > 0 else 1e-3
    out = []
    for i, P in enumerate(pred["power"]):
        l1, l2, a = pred["lambda1"][i], pred["lambda2"][i], pred["a"][i]
        if rel_noise > 0:
            n1, n2, n3 = rng.standard_normal(3)
            vals = (l1 * (1 + rel_noise * n1), l2 * (1 + rel_noise * n2), a * (1 + rel_noise * n3))
        else:
            vals = (l1, l2, a)
        v1, v2 = max(vals[0], vals[1]), min(vals[0], vals[1])
        out.append(PowerSeriesPoint(float(P), float(v1), float(v2), float(vals[2]),
                                    rel * l1, rel * l2, rel * abs(a) if a != 0 else rel))
    return out


def initial_rates(series) -> dict:
    """Closed-form start values from per-power inversion.

    At every power the data fix k31 = l1 l2 / (a (l1 - l2) + l1); then
    l1 + l2 - k31 = alpha P + (k21 + k23) and l1 l2 - k31 (l1 + l2 - k31) =
    alpha k23 P are linear in P, and so is k31(P) = k31_0 + k31_0 beta P.
    """
    P = np.array([p.power for p in series])
    l1 = np.array([p.lambda1 for p in series])
    l2 = np.array([p.lambda2 for p in series])
    a = np.array([p.a for p in series])
    k31 = l1 * l2 / (a * (l1 - l2) + l1)
    s = l1 + l2 - k31
    alpha, k2sum = np.polyfit(P, s, 1)
    q = l1 * l2 - k31 * s
    alpha_k23 = float(np.dot(P, q) / np.dot(P, P))
    slope31, k31_0 = np.polyfit(P, k31, 1)
    tiny = 1e-6
    alpha = max(alpha, tiny * max(s.max(), tiny) / P.max())
    k23 = max(alpha_k23 / alpha, tiny)
    k21 = max(k2sum - k23, 0.05 * max(k2sum, tiny))
    k31_0 = max(k31_0, tiny)
    beta = max(slope31 / k31_0, tiny / P.max())
    return {"k21": k21, "k23": k23, "k31_0": k31_0, "alpha": alpha, "beta": beta}


def _fit_rates(series, power_dependent: bool, init=None) -> FitResult:
    P = np.array([p.power for p in series], dtype=float)
    l1 = np.array([p.lambda1 for p in series])
    l2 = np.array([p.lambda2 for p in series])
    a = np.array([p.a for p in series])

    def sig(values, s):
        s = np.array(s, dtype=float)
        return np.where(np.isfinite(s) & (s > 0), s, np.abs(values) + (values == 0))

    s1, s2, sa = sig(l1, [p.sigma_lambda1 for p in series]), sig(l2, [p.sigma_lambda2 for p in series]), \
        sig(a, [p.sigma_a for p in series])
    log_a = bool(np.all(a > 0) and a.max() / a.min() > 10)
    a_obs, sa_eff = (np.log(a), sa / a) if log_a else (a, sa)
    y = np.concatenate([l1, l2, a_obs])
    sigma = np.concatenate([s1, s2, sa_eff])
    names = ["k21", "k23", "k31_0", "alpha"] + (["beta"] if power_dependent else [])
    start = init or initial_rates(series)

    def model(th):
        with np.errstate(all="ignore"):
            return _model(th)

    def _model(th):
        full = list(th) + ([] if power_dependent else [0.0])
        (m1, m2, ma), J = _rates_and_jacobian(full, P)
        if log_a:
            ma_out = np.log(ma)
            cols = [np.concatenate([J[n][0], J[n][1], J[n][2] / ma]) for n in names]
        else:
            ma_out = ma
            cols = [np.concatenate(J[n]) for n in names]
        m = np.concatenate([m1, m2, ma_out])
        jac = np.column_stack(cols)
        bad = ~np.isfinite(m)
        if np.any(bad):
            m = np.where(bad, 1e6, m)
            jac = np.where(np.isfinite(jac), jac, 0.0)
        return m, jac

    absolute = all(np.isfinite(p.sigma_lambda1) for p in series)
    res = _solve(names, [start[n] for n in names], [True] * len(names), model, y, sigma,
                 absolute_sigma=absolute,
                 meta={"model": "three_level_rates",
                       "shelving_mode": "power-dependent" if power_dependent else "power-independent",
                       "a_log_scale": log_a})
    if not power_dependent:
        res.params["beta"] = 0.0
        res.uncertainties["beta"] = 0.0
    return res


def extract_rates(series, shelving_mode: str = "power-dependent"):
    """Fit a RateModel to per-power (lambda1, lambda2, a).

    All three observables at every power enter one weighted least-squares
    problem over (k21, k23, k31_0, alpha[, beta]); ``power-independent`` pins
    beta = 0.  ``auto`` fits both and keeps beta when an F-test on the
    chi-square improvement gives p < 0.05 (a heuristic, recorded in
    ``meta['auto_selection']``).

    Returns ``(RateModel, FitResult)``.
    """
    if shelving_mode not in SHELVING_MODES:
        raise ValueError(f"shelving_mode must be one of {SHELVING_MODES}")
    series = sorted(series, key=lambda p: p.power)
    n_params = 5 if shelving_mode != "power-independent" else 4
    if len(series) < 3:
        raise UnderdeterminedError(
            f"{len(series)} power points cannot constrain a {n_params}-parameter rate model; need >= 3")
    if len({p.power for p in series}) < len(series):
        raise ValueError("duplicate powers in series")

    if shelving_mode == "auto":
        fixed = _fit_rates(series, False)
        free = _fit_rates(series, True)
        dof = free.dof
        if dof > 0 and free.chi2 > 0:
            F = (fixed.chi2 - free.chi2) / (free.chi2 / dof)
            p_value = float(stats.f.sf(F, 1, dof))
        else:
            F, p_value = float("inf"), 0.0
        res = free if p_value < 0.05 else fixed
        res.meta["auto_selection"] = {"heuristic": "F-test", "F": float(F), "p_value": p_value}
    else:
        res = _fit_rates(series, shelving_mode == "power-dependent")

    p = res.params
    if any(v < 0 for v in p.values()):
        res.flags.append("negative_rate")
    model = RateModel(k21=p["k21"], k23=p["k23"], k31_0=p["k31_0"], alpha=p["alpha"], beta=p["beta"])
    return model, res


def derive_lifetimes(model: RateModel) -> tuple[float, float]:
    """(excited-state lifetime, metastable lifetime) in ns."""
    return excited_state_lifetime(model), metastable_lifetime(model)


def shelving_ratio(model: RateModel) -> float:
    """k21 / k23: how much faster radiative decay is than shelving."""
    return model.k21 / model.k23 if model.k23 > 0 else math.inf


@dataclass(frozen=True)
class VisibilityResult:
    visibility: float
    i_max: float
    i_min: float
    axis_angle: float

    def __post_init__(self):
        if not self.i_max >= self.i_min >= 0:
            raise ValueError("need i_max >= i_min >= 0")


def visibility(i_max: float, i_min: float) -> float:
    """Polarization contrast (i_max - i_min) / (i_max + i_min)."""
    if i_min < 0 or i_max < i_min:
        raise ValueError("need i_max >= i_min >= 0")
    if i_max + i_min == 0:
        raise ValueError("visibility undefined for zero intensity")
    return (i_max - i_min) / (i_max + i_min)


def visibility_from_fit(p: PolarizationParams) -> VisibilityResult:
    if p.a == 0 and p.b == 0:
        raise ValueError("visibility undefined for a = b = 0")
    return VisibilityResult(visibility=p.b / (2 * p.a + p.b), i_max=p.a + p.b, i_min=p.a,
                            axis_angle=p.phi0 % 180.0)


def _wrap(x, period):
    """Wrap into (-period/2, period/2]."""
    half = period / 2
    return half - np.mod(half - np.asarray(x, dtype=float), period)


def dipole_misalignment(absorption_axis, emission_axis, convention: str = "raw"):
    """Signed absorption-minus-emission axis difference in degrees.

    ``raw`` wraps to (-180, 180]; ``folded`` respects the 180 degree dipole
    symmetry and wraps to (-90, 90].
    """
    d = np.asarray(absorption_axis, dtype=float) - np.asarray(emission_axis, dtype=float)
    if convention == "raw":
        out = _wrap(d, 360.0)
    elif convention == "folded":
        out = _wrap(d, 180.0)
    else:
        raise ValueError("convention must be 'raw' or 'folded'")
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class EnsembleStats:
    mean: float
    std: float
    n: int
    edges: np.ndarray
    counts: np.ndarray


def ensemble_stats(values, bin_width: float) -> EnsembleStats:
    """Sample mean, sample standard deviation (n - 1) and histogram.

    Bin edges are multiples of ``bin_width``.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least 2 values")
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    lo = math.floor(v.min() / bin_width)
    hi = math.floor(v.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    counts, _ = np.histogram(v, bins=edges)
    return EnsembleStats(float(v.mean()), float(v.std(ddof=1)), int(v.size), edges, counts)


def linewidth_ratio(measured_fwhm: float, lifetime: float) -> float:
    """Measured FWHM (meV) over the transform limit of ``lifetime`` (ns)."""
    if not (measured_fwhm > 0 and lifetime > 0):
        raise ValueError("measured_fwhm and lifetime must be > 0")
    return measured_fwhm * 1000.0 / transform_limited_linewidth(lifetime)


@dataclass
class EmitterReport:
    """Everything derived for one emitter.  Absent blocks are ``None``."""

    emitter_id: str
    rate_model: RateModel | None = None
    shelving_mode: str | None = None
    tau_excited: float | None = None
    tau_metastable: float | None = None
    measured_lifetime: float | None = None
    gamma_limit: float | None = None
    gamma_source: str | None = None
    zpl_energy: float | None = None
    fwhm: float | None = None
    linewidth_ratio: float | None = None
    g2_series: list = field(default_factory=list)
    absorption: VisibilityResult | None = None
    emission: VisibilityResult | None = None
    misalignment: float | None = None
    polarization_fits: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rate_model"] = None if self.rate_model is None else self.rate_model.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmitterReport":
        d = dict(d)
        if d.get("rate_model") is not None:
            d["rate_model"] = RateModel(**d["rate_model"])
        for k in ("absorption", "emission"):
            if d.get(k) is not None:
                d[k] = VisibilityResult(**d[k])
        return cls(**d)


def build_report(emitter_id: str, rate_model: RateModel | None = None,
                 shelving_mode: str | None = None, g2_series=(), zpl_energy=None, fwhm=None,
                 measured_lifetime=None, absorption: PolarizationParams | None = None,
                 emission: PolarizationParams | None = None, lifetimes=None,
                 polarization_fits: dict | None = None) -> EmitterReport:
    """Join the per-emitter results and check they agree with each other.

    ``lifetimes`` (excited, metastable), when supplied, must match the rate
    model to 1e-9 relative.  The transform limit uses the pulsed
    ``measured_lifetime`` when given, else the rate-model excited lifetime.
    """
    if shelving_mode is not None and shelving_mode not in SHELVING_MODES[:2]:
        raise ValueError(f"invalid shelving_mode {shelving_mode!r}")
    tau2 = tau3 = None
    if rate_model is not None:
        tau2, tau3 = derive_lifetimes(rate_model)
        if shelving_mode is None:
            shelving_mode = "power-dependent" if rate_model.beta > 0 else "power-independent"
        if shelving_mode == "power-independent" and rate_model.beta != 0:
            raise ValueError("power-independent shelving requires beta = 0")
        if lifetimes is not None:
            for given, computed in zip(lifetimes, (tau2, tau3)):
                if not math.isclose(given, computed, rel_tol=1e-9):
                    raise ValueError(f"lifetime {given} inconsistent with rate model ({computed})")
    elif lifetimes is not None:
        raise ValueError("lifetimes given without a rate model")
    if measured_lifetime is not None:
        gamma, source = transform_limited_linewidth(measured_lifetime), "measured_lifetime"
    elif tau2 is not None:
        gamma, source = transform_limited_linewidth(tau2), "tau_excited"
    else:
        gamma, source = None, None
    ratio = None
    if fwhm is not None and gamma is not None:
        ratio = fwhm * 1000.0 / gamma
    abs_v = visibility_from_fit(absorption) if absorption is not None else None
    em_v = visibility_from_fit(emission) if emission is not None else None
    mis = None
    if abs_v is not None and em_v is not None:
        mis = dipole_misalignment(abs_v.axis_angle, em_v.axis_angle, "raw")
    series = [dict(p) if isinstance(p, dict) else asdict(p) for p in g2_series]
    return EmitterReport(
        emitter_id=str(emitter_id), rate_model=rate_model, shelving_mode=shelving_mode,
        tau_excited=tau2, tau_metastable=tau3, measured_lifetime=measured_lifetime,
        gamma_limit=gamma, gamma_source=source, zpl_energy=zpl_energy, fwhm=fwhm,
        linewidth_ratio=ratio, g2_series=series, absorption=abs_v, emission=em_v,
        misalignment=mis, polarization_fits=dict(polarization_fits or {}),
    )
