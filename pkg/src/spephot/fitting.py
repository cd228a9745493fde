"""Weighted nonlinear least squares for the four measurement models.

Models: three-level g2 (optionally diluted by uncorrelated background),
saturation hyperbola, post-peak double exponential, cos^2 polarization.
Strictly positive parameters are fitted as logarithms so covariances stay
meaningful near zero; the damped least-squares solve is MINPACK's
Levenberg-Marquardt via ``scipy.optimize.least_squares``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .correlator import G2Curve, TcspcHistogram, drop_block
from .kinetics import G2Params

log = logging.getLogger(__name__)

MAX_ITERATIONS = 200
XTOL = 1e-10
GTOL = 1e-12


@dataclass
class FitResult:
    """Outcome of one fit.

    ``params``/``uncertainties`` map parameter names to values and 1-sigma
    errors in natural units; ``covariance`` is ordered like ``param_names``.
    ``flags`` collects identifiability and convergence warnings; ``meta``
    records the model and options used.
    """

    params: dict
    uncertainties: dict
    residual_norm: float
    iterations: int
    converged: bool
    covariance: np.ndarray
    param_names: tuple = ()
    chi2: float = float("nan")
    dof: int = 0
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else float("nan")


@dataclass(frozen=True)
class SaturationParams:
    i_inf: float
    p_sat: float

    def __post_init__(self):
        if not (self.i_inf > 0 and self.p_sat > 0):
            raise ValueError("i_inf and p_sat must be > 0")


@dataclass(frozen=True)
class PolarizationParams:
    a: float
    b: float
    phi0: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("polarization offset and amplitude must be >= 0")


@dataclass(frozen=True, eq=False)
class PolarizationScan:
    """Intensity versus analyzer (emission) or half-wave-plate (absorption) angle."""

    angles: np.ndarray  # degrees
    intensities: np.ndarray
    errors: np.ndarray | None = None
    role: str = "emission"

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=float))
        object.__setattr__(self, "intensities", np.asarray(self.intensities, dtype=float))
        if self.errors is not None:
            object.__setattr__(self, "errors", np.asarray(self.errors, dtype=float))
        if self.angles.shape != self.intensities.shape:
            raise ValueError("angles and intensities must match")
        if self.role not in ("absorption", "emission"):
            raise ValueError("role must be 'absorption' or 'emission'")


# --------------------------------------------------------------------------
# solver


def _solve(names, x0, log_mask, model_jac, y, sigma, absolute_sigma=True, meta=None):
    """Minimize sum(((model - y) / sigma)**2) over internal parameters.

    ``model_jac(theta)`` returns model values and d model / d theta in natural
    parameters; ``log_mask`` marks entries fitted as log(theta).
    """
    log_mask = np.asarray(log_mask, dtype=bool)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    def to_natural(u):
        # clip keeps wild LM trial steps finite; they are rejected either way
        return np.where(log_mask, np.exp(np.clip(np.where(log_mask, u, 0.0), -700, 700)), u)

    def fun(u):
        m, _ = model_jac(to_natural(u))
        return (m - y) / sigma

    def jac(u):
        theta = to_natural(u)
        _, j = model_jac(theta)
        return j * np.where(log_mask, theta, 1.0)[None, :] / sigma[:, None]

    u0 = np.where(log_mask, np.log(np.where(log_mask, x0, 1.0)), x0)
    res = least_squares(fun, u0, jac=jac, method="lm", xtol=XTOL, gtol=GTOL, ftol=1e-15,
                        max_nfev=2 * MAX_ITERATIONS * (len(names) + 1))
    theta = to_natural(res.x)
    J = res.jac
    chi2 = float(np.sum(res.fun ** 2))
    dof = y.size - len(names)
    flags = []
    try:
        cov_u = np.linalg.inv(J.T @ J)
        if not np.all(np.isfinite(cov_u)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov_u = np.full((len(names), len(names)), np.inf)
        flags.append("singular_jacobian")
    scale = np.where(log_mask, theta, 1.0)
    with np.errstate(invalid="ignore"):
        cov = cov_u * np.outer(scale, scale)
        if not absolute_sigma and dof > 0:
            cov = cov * (chi2 / dof)
        unc = np.sqrt(np.abs(np.diag(cov)))
    iterations = int(res.njev) if res.njev is not None else int(res.nfev)
    converged = bool(res.status > 0 and iterations <= MAX_ITERATIONS)
    if not converged:
        flags.append("unconverged")
    grad_inf = float(np.max(np.abs(J.T @ res.fun))) if J.size else 0.0
    meta = dict(meta or {})
    meta.update(status=int(res.status), gradient_inf_norm=grad_inf, absolute_sigma=absolute_sigma)
    return FitResult(
        params={n: float(v) for n, v in zip(names, theta)},
        uncertainties={n: float(v) for n, v in zip(names, unc)},
        residual_norm=math.sqrt(chi2), iterations=iterations, converged=converged,
        covariance=cov, param_names=tuple(names), chi2=chi2, dof=dof, flags=flags, meta=meta,
    )


# --------------------------------------------------------------------------
# g2


def _exp_bin_average(left, right, tau):
    """Average of exp(-|t|/tau) over [left, right] and its tau-derivative.

    Zero-width bins reduce to point evaluation at ``left``.
    """
    l = np.asarray(left, dtype=float)
    r = np.asarray(right, dtype=float)
    neg = r <= 0
    lo = np.where(neg, -r, l)
    hi = np.where(neg, -l, r)
    w = hi - lo
    point = w <= 0
    straddle = (lo < 0) & ~point
    a = np.abs(lo)

    ea = np.exp(-a / tau)
    eb = np.exp(-hi / tau)
    # both edges on one side: tau * (e^{-lo/tau} - e^{-hi/tau}) / w
    ws = np.where(point, 1.0, w)
    same = -tau * ea * np.expm1(-(hi - a) / tau) / ws
    dsame = (ea * (1 + a / tau) - eb * (1 + hi / tau)) / ws
    cross = tau * (2.0 - ea - eb) / ws
    dcross = (2.0 - ea * (1 + a / tau) - eb * (1 + hi / tau)) / ws
    val = np.where(straddle, cross, same)
    dval = np.where(straddle, dcross, dsame)
    val = np.where(point, ea, val)
    dval = np.where(point, a / tau ** 2 * ea, dval)
    return val, dval


def _duration_bias(m, J, integral, d_integral, span):
    """Apply the finite-duration normalization bias to a model.

    Normalizing by the observed counts divides the estimate by
    ``1 + 2 I / (T - |t|)`` on average, with ``I`` the integral of
    ``g_meas - 1`` over positive lags and ``T`` the normalization segment.
    """
    if span is None:
        return m, J
    f = 1.0 / (1.0 + 2.0 * integral / span)
    df = -(f * f * 2.0 / span)[:, None] * np.asarray(d_integral)[None, :]
    return m * f, J * f[:, None] + m[:, None] * df


def g2_model(theta, left, right, with_rho=False, span=None):
    """Bin-averaged g2 and its Jacobian for theta = (a, tau1, tau2[, rho]).

    ``span`` (ns per bin, ``T - |lag|``) adds the finite-duration bias of
    count-normalized estimators.
    """
    a, t1, t2 = theta[0], theta[1], theta[2]
    rho = theta[3] if with_rho else 1.0
    e1, de1 = _exp_bin_average(left, right, t1)
    e2, de2 = _exp_bin_average(left, right, t2)
    excess = -(1 + a) * e1 + a * e2
    r2 = rho * rho
    m = 1.0 + r2 * excess
    cols = [r2 * (e2 - e1), -r2 * (1 + a) * de1, r2 * a * de2]
    area = a * t2 - (1 + a) * t1
    d_area = [r2 * (t2 - t1), -r2 * (1 + a), r2 * a]
    if with_rho:
        cols.append(2 * rho * excess)
        d_area.append(2 * rho * area)
    return _duration_bias(m, np.column_stack(cols), r2 * area, d_area, span)


def _two_level_model(theta, left, right, with_rho=False, span=None):
    t1 = theta[0]
    rho = theta[1] if with_rho else 1.0
    e1, de1 = _exp_bin_average(left, right, t1)
    m = 1.0 - rho * rho * e1
    cols = [-rho * rho * de1]
    d_area = [-rho * rho]
    if with_rho:
        cols.append(-2 * rho * e1)
        d_area.append(-2 * rho * t1)
    return _duration_bias(m, np.column_stack(cols), -rho * rho * t1, d_area, span)


def _segment_span(curve: G2Curve):
    """``T - |lag|`` per bin for the normalization segment, or None if unknown."""
    T = curve.norm.get("block_duration", curve.norm.get("duration"))
    if T is None:
        return None
    span = float(T) - np.abs(curve.lags)
    return span if np.all(span > 0) else None


def _curve_sigma(curve: G2Curve) -> np.ndarray:
    err = curve.errors.copy()
    if np.all(err <= 0):
        return np.ones_like(err)
    if np.any(err <= 0):
        denom = curve.norm.get("denominators")
        if denom is not None and np.size(denom) == err.size:
            fallback = 1.0 / np.asarray(denom, dtype=float)
        else:
            fallback = np.full_like(err, err[err > 0].min())
        err = np.where(err > 0, err, fallback)
    return err


def initial_g2_guess(curve: G2Curve) -> G2Params:
    """Heuristic start: a from the bunching peak, tau2 from the tail decay of
    (g2 - 1), tau1 from the first crossing of g2 = 1.  Ties go to the smallest lag."""
    t = np.abs(curve.lags)
    order = np.argsort(t, kind="stable")
    t, g = t[order], curve.values[order]
    span = t.max() if t.size else 1.0
    i_peak = int(np.argmax(g))
    a0 = max(g[i_peak] - 1.0, 0.0)
    above = np.nonzero(g >= 1.0)[0]
    t_cross = t[above[0]] if above.size else None
    if a0 > 0 and t_cross is not None and t_cross > 0:
        tail = (t >= t[i_peak]) & (g - 1 > 0.05 * a0)
        if np.count_nonzero(tail) >= 3 and np.ptp(t[tail]) > 0:
            slope = np.polyfit(t[tail], np.log(g[tail] - 1), 1)[0]
            tau2 = -1.0 / slope if slope < 0 else span / 3
        else:
            tau2 = span / 3
        tau1 = t_cross / math.log((1 + a0) / a0)
    else:
        below = np.nonzero(g >= 1 - math.exp(-1))[0]
        tau1 = t[below[0]] if below.size and t[below[0]] > 0 else span / 10
        tau2 = span / 3
    tau1 = max(tau1, 1e-3 * span if span > 0 else 1e-3)
    tau2 = max(tau2, 2 * tau1)
    a0 = max(a0, 1e-3)
    return G2Params(a=a0, tau1=tau1, tau2=tau2)


def _has_bunching(curve: G2Curve, sigma, tau1) -> bool:
    t = np.abs(curve.lags)
    far = t > 3 * tau1
    if not np.any(far):
        return False
    excess = curve.values[far] - 1.0
    noiseless = np.all(curve.errors <= 0)
    if noiseless:
        return bool(np.max(excess) > 1e-9)
    return bool(np.max(excess / sigma[far]) > 3.0)


_REWEIGHT_PASSES = 2


def _counting_denominators(curve: G2Curve):
    D = curve.norm.get("denominators")
    if curve.counts is None or D is None or np.size(D) != curve.lags.size:
        return None
    return np.asarray(D, dtype=float)


def _solve_g2(names, x0, model, curve, sigma, absolute, meta):
    """Least squares on a g2 curve; counting curves are refit with model variances.

    Weights from observed counts favour bins that fluctuated low and bias the
    fit (notably tau2) downward.  For histograms with known denominators the
    bin variance is taken from the fitted model instead, ``m D / D^2``.
    """
    res = _solve(names, x0, [True] * len(names), model, curve.values, sigma, absolute, meta)
    D = _counting_denominators(curve)
    if D is None:
        return res
    for _ in range(_REWEIGHT_PASSES):
        m, _ = model(np.array([res.params[n] for n in names]))
        sigma = np.sqrt(np.maximum(m * D, 1.0)) / D
        res = _solve(names, [res.params[n] for n in names], [True] * len(names), model,
                     curve.values, sigma, True, meta | {"weights": "model"})
    return res


def fit_g2(curve: G2Curve, init: G2Params | None = None, background: bool = False) -> FitResult:
    """Fit the three-level g2 to a measured curve.

    The model is averaged over each lag bin when the curve carries bin edges.
    With ``background=True`` the ideal curve is diluted,
    ``g_meas = 1 + rho^2 (g_ideal - 1)``, and rho is fitted too.  Curves
    without significant bunching fall back to the two-level form with a = 0
    and are flagged ``tau2_unidentifiable``.
    """
    if curve.lags.size < 10:
        raise ValueError("need at least 10 bins to fit g2")
    left, right = curve.bin_left, curve.bin_right
    sigma = _curve_sigma(curve)
    absolute = not np.all(curve.errors <= 0)
    guess = init or initial_g2_guess(curve)
    span = _segment_span(curve)
    meta = {"model": "g2_three_level", "background": background, "init": vars(guess).copy(),
            "normalization_segment": None if span is None else float(span[0] + abs(curve.lags[0]))}

    if init is None and not _has_bunching(curve, sigma, guess.tau1):
        names = ["tau1"] + (["rho"] if background else [])
        x0 = [guess.tau1] + ([0.9] if background else [])
        res = _solve_g2(names, x0, lambda th: _two_level_model(th, left, right, background, span),
                        curve, sigma, absolute, meta | {"model": "g2_two_level"})
        res.params = {"a": 0.0, "tau1": res.params["tau1"], "tau2": float("nan"),
                      **({"rho": res.params["rho"]} if background else {})}
        res.uncertainties = {"a": 0.0, "tau1": res.uncertainties["tau1"], "tau2": float("nan"),
                             **({"rho": res.uncertainties["rho"]} if background else {})}
        res.flags += ["two_level", "tau2_unidentifiable"]
        return res

    names = ["a", "tau1", "tau2"] + (["rho"] if background else [])
    x0 = [guess.a, guess.tau1, guess.tau2] + ([0.9] if background else [])
    res = _solve_g2(names, x0, lambda th: g2_model(th, left, right, background, span),
                    curve, sigma, absolute, meta)
    if res.params["tau2"] <= res.params["tau1"]:
        res.flags.append("tau2_le_tau1")
        log.warning("fit_g2: tau2 <= tau1 at optimum; bunching and antibunching not separable")
    if background and res.params["rho"] > 1:
        res.flags.append("rho_above_one")
    return res


def fit_g2_jackknife(curve: G2Curve, background: bool = False) -> FitResult:
    """:func:`fit_g2` with delete-one-block jackknife uncertainties.

    ``curve`` comes from :func:`~spephot.correlator.block_correlate`.  Poisson
    bin errors ignore that slow blinking moves every lag bin together; the
    spread of the leave-one-block-out fits does not.  The Poisson-based
    uncertainties stay in ``meta['poisson_uncertainties']``.
    """
    n = int(curve.norm.get("n_blocks", 0))
    if n < 3:
        raise ValueError("jackknife needs a block-pooled curve with >= 3 blocks")
    full = fit_g2(curve, background=background)
    two_level = "two_level" in full.flags
    init = None if two_level else g2_params_from_fit(full)
    names = ["tau1"] if two_level else ["a", "tau1", "tau2"]
    if background:
        names.append("rho")
    reps = []
    for k in range(n):
        r = fit_g2(drop_block(curve, k), init=init, background=background)
        reps.append([r.params[m] for m in names])
    reps = np.asarray(reps)
    dev = reps - reps.mean(axis=0)
    cov = (n - 1) / n * dev.T @ dev
    full.meta["poisson_uncertainties"] = dict(full.uncertainties)
    full.meta.update(uncertainty="jackknife", n_blocks=n)
    for m, v in zip(names, np.sqrt(np.diag(cov))):
        full.uncertainties[m] = float(v)
    if list(full.param_names) == names:
        full.covariance = cov
    return full


def g2_params_from_fit(res: FitResult) -> G2Params:
    p = res.params
    if "tau2_unidentifiable" in res.flags:
        return G2Params(a=0.0, tau1=p["tau1"], tau2=p["tau1"])
    return G2Params(a=p["a"], tau1=p["tau1"], tau2=p["tau2"])


def dilute_g2(g_ideal, rho):
    """Measured g2 when a fraction 1 - rho of the counts is uncorrelated background."""
    return 1.0 + rho ** 2 * (np.asarray(g_ideal) - 1.0)


def correct_g2_background(g0_measured, rho):
    """Background-free g2 value from a measured one and the signal fraction rho."""
    if not 0 < rho <= 1:
        raise ValueError("rho must be in (0, 1]")
    if np.any(np.asarray(g0_measured) < 0):
        raise ValueError("g0_measured must be >= 0")
    return 1.0 + (np.asarray(g0_measured) - 1.0) / rho ** 2


def signal_fraction(signal_rate, background_rate):
    return signal_rate / (signal_rate + background_rate)


# --------------------------------------------------------------------------
# saturation


def saturation_curve(power, i_inf, p_sat):
    p = np.asarray(power, dtype=float)
    return i_inf * p / (p + p_sat)


def fit_saturation(power, intensity, errors=None) -> FitResult:
    """Fit I = I_inf P / (P + P_sat).

    Without ``errors`` the fit is unweighted and the covariance is scaled by
    the reduced chi-square.
    """
    p = np.asarray(power, dtype=float)
    i = np.asarray(intensity, dtype=float)
    if p.shape != i.shape:
        raise ValueError("power and intensity must match")
    if np.unique(p).size < 3:
        raise ValueError("need at least 3 distinct powers")
    order = np.lexsort((i, p))
    p, i = p[order], i[order]
    sigma = np.ones_like(i) if errors is None else np.asarray(errors, dtype=float)[order]
    flags = []
    if np.ptp(i) <= 1e-12 * max(abs(i).max(), 1e-300):
        flags.append("unidentifiable")
    i_inf0 = max(i.max(), 1e-12) * 1.5
    half = np.nonzero(i >= i_inf0 / 2)[0]
    p_sat0 = p[half[0]] if half.size else p.max()
    p_sat0 = max(p_sat0, 1e-6 * max(p.max(), 1.0))

    def model(th):
        d = p + th[1]
        return th[0] * p / d, np.column_stack([p / d, -th[0] * p / d ** 2])

    res = _solve(["i_inf", "p_sat"], [i_inf0, p_sat0], [True, True], model, i, sigma,
                 absolute_sigma=errors is not None, meta={"model": "saturation"})
    if res.params["p_sat"] > 10 * p.max():
        # still linear over the scan: only the slope i_inf / p_sat is constrained
        flags.append("p_sat_beyond_range")
    res.flags += flags
    return res


# --------------------------------------------------------------------------
# double exponential


def fit_double_exponential(hist: TcspcHistogram, errors=None) -> FitResult:
    """Fit A_fast e^{-t/tau_fast} + A_slow e^{-t/tau_slow} + baseline after the peak.

    ``t`` counts from the peak bin.  The slow component is the emitter
    lifetime; the fast one absorbs the instrument response.  Poisson weights
    sqrt(max(counts, 1)) unless ``errors`` is given.
    """
    y_all = np.asarray(hist.counts, dtype=float)
    x_all = hist.centers
    i_peak = int(np.argmax(y_all))
    if y_all.size - i_peak - 1 < 20:
        raise ValueError("need at least 20 bins after the peak")
    x = x_all[i_peak:] - x_all[i_peak]
    y = y_all[i_peak:]
    if errors is None:
        sigma = np.sqrt(np.maximum(y, 1.0))
    else:
        sigma = np.asarray(errors, dtype=float)[i_peak:]

    # log-linear regression on the tail for the slow component
    n = y.size
    base0 = float(np.median(y[-max(3, n // 10):]))
    z = y - base0
    # tail = later half of the region where the signal stands clear of the baseline
    live = np.nonzero(z > max(0.01 * z[0], 3 * np.sqrt(max(base0, 1.0))))[0]
    last = live[-1] + 1 if live.size >= 6 else n
    tail = slice(last // 2, last)
    ty, tx = z[tail], x[tail]
    ok = ty > 0
    if np.count_nonzero(ok) >= 3:
        slope, icpt = np.polyfit(tx[ok], np.log(ty[ok]), 1, w=np.sqrt(ty[ok]))
        tau_s0 = -1.0 / slope if slope < 0 else x[-1] / 3
        a_s0 = math.exp(icpt)
    else:
        tau_s0, a_s0 = x[-1] / 3, y[0]
    tau_s0 = min(max(tau_s0, 3 * (x[1] - x[0])), 10 * x[-1])
    a_s0 = min(a_s0, y[0])
    a_f0 = max(y[0] - a_s0 - base0, 0.05 * y[0])
    tau_f0 = tau_s0 / 5

    def model(th):
        with np.errstate(all="ignore"):
            return _model(th)

    def _model(th):
        af, tf, as_, ts, c = th
        ef, es = np.exp(-x / tf), np.exp(-x / ts)
        m = af * ef + as_ * es + c
        j = np.column_stack([ef, af * x / tf ** 2 * ef, es, as_ * x / ts ** 2 * es, np.ones_like(x)])
        return m, j

    names = ["A_fast", "tau_fast", "A_slow", "tau_slow", "baseline"]
    res = _solve(names, [a_f0, tau_f0, a_s0, tau_s0, base0],
                 [False, True, False, True, False], model, y, sigma, True,
                 meta={"model": "double_exponential", "t0": float(x_all[i_peak])})
    p, u = res.params, res.uncertainties
    if p["tau_fast"] > p["tau_slow"]:
        # keep the slow component as the emitter lifetime
        order = [2, 3, 0, 1, 4]
        swapped = [names[k] for k in order]
        res.params = {n: p[s] for n, s in zip(names, swapped)}
        res.uncertainties = {n: u[s] for n, s in zip(names, swapped)}
        res.covariance = res.covariance[np.ix_(order, order)]
        p, u = res.params, res.uncertainties
    total = abs(p["A_fast"]) + abs(p["A_slow"])
    if abs(p["A_fast"]) < 2 * u["A_fast"] or abs(p["A_fast"]) < 1e-3 * total:
        res.flags.append("fast_component_negligible")
    if abs(p["tau_slow"] - p["tau_fast"]) < u["tau_slow"] + u["tau_fast"]:
        res.flags.append("tau_fast_close_to_tau_slow")
    return res


def double_exponential(t, a_fast, tau_fast, a_slow, tau_slow, baseline=0.0):
    t = np.asarray(t, dtype=float)
    return a_fast * np.exp(-t / tau_fast) + a_slow * np.exp(-t / tau_slow) + baseline


# --------------------------------------------------------------------------
# polarization


def polarization_curve(angle_deg, a, b, phi0):
    return a + b * np.cos(np.radians(np.asarray(angle_deg, dtype=float) - phi0)) ** 2


def fit_polarization(scan: PolarizationScan) -> FitResult:
    """Fit I(phi) = a + b cos^2(phi - phi0); phi0 reported in [0, 180) degrees."""
    phi = scan.angles
    y = scan.intensities
    if phi.size < 8:
        raise ValueError("need at least 8 angles")
    if np.ptp(phi) < 180 - 1e-9 and np.ptp(np.mod(phi, 360)) < 180 - 1e-9:
        raise ValueError("angles must span at least 180 degrees")
    sigma = np.ones_like(y) if scan.errors is None else scan.errors
    flags = []
    # argmax start; np.argmax keeps the first of tied maxima, so sort by angle first
    order = np.argsort(phi, kind="stable")
    phi0_init = float(phi[order][np.argmax(y[order])])
    a0 = float(y.min())
    b0 = float(np.ptp(y))

    def model(th):
        a, b, p0 = th
        x = np.radians(phi) - p0
        c, s = np.cos(x), np.sin(x)
        return a + b * c * c, np.column_stack([np.ones_like(x), c * c, 2 * b * c * s])

    res = _solve(["a", "b", "phi0"], [a0, b0, math.radians(phi0_init)], [False, False, False],
                 model, y, sigma, absolute_sigma=scan.errors is not None,
                 meta={"model": "polarization", "role": scan.role})
    p, u = res.params, res.uncertainties
    a, b, p0 = p["a"], p["b"], p["phi0"]
    if b < 0:
        a, b, p0 = a + b, -b, p0 + math.pi / 2
    deg = math.degrees(p0) % 180.0
    if deg >= 180.0:
        deg = 0.0
    res.params = {"a": a, "b": b, "phi0": deg}
    res.uncertainties = {"a": u["a"], "b": u["b"], "phi0": math.degrees(u["phi0"])}
    scale = np.array([1.0, 1.0, math.degrees(1.0)])
    res.covariance = res.covariance * np.outer(scale, scale)
    if b <= 1e-9 * max(abs(a), 1e-300) or b < 2 * u["b"]:
        flags.append("phi0_unidentifiable")
    if a < 0:
        flags.append("negative_offset")
    res.flags += flags
    return res


def polarization_params_from_fit(res: FitResult) -> PolarizationParams:
    p = res.params
    return PolarizationParams(a=max(p["a"], 0.0), b=max(p["b"], 0.0), phi0=p["phi0"])
