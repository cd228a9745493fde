"""Three-level emitter kinetics.

Levels: |1> ground, |2> excited, |3> metastable (shelving) state.  Transitions
1->2 (pump, k12 = alpha * P), 2->1 (radiative, k21), 2->3 (shelving, k23) and
3->1 (deshelving, k31 = k31_0 * (1 + beta * P)).

Units throughout: time ns, rates 1/ns, power uW, linewidth ueV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HBAR_UEV_NS = 0.6582119569  # reduced Planck constant in ueV * ns

# discriminant threshold for distinct eigen-decay rates, relative to trace^2
DEGENERACY_TOL = 1e-14


class DegenerateSpectrumError(ValueError):
    """The two eigen-decay rates coincide; the two-exponential form does not apply."""


@dataclass(frozen=True)
class RateModel:
    """Power-dependent three-level rate model.

    Attributes
    ----------
    k21, k23, k31_0 : float
        Radiative, shelving and zero-power deshelving rates (1/ns).
    alpha : float
        Pump coefficient, k12 = alpha * P (1/(ns uW)).
    beta : float
        Deshelving power coefficient, k31 = k31_0 * (1 + beta * P) (1/uW).
    """

    k21: float
    k23: float
    k31_0: float
    alpha: float
    beta: float = 0.0

    def __post_init__(self):
        for name in ("k21", "k23", "k31_0", "alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"RateModel.{name} must be finite and >= 0, got {v}")
        if self.k21 <= 0:
            raise ValueError("RateModel.k21 must be > 0")

    @property
    def power_dependent_shelving(self) -> bool:
        return self.beta > 0

    def as_dict(self) -> dict:
        return {"k21": self.k21, "k23": self.k23, "k31_0": self.k31_0,
                "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class InstantRates:
    """Transition rates (1/ns) at one fixed excitation power."""

    k12: float
    k21: float
    k23: float
    k31: float

    def __post_init__(self):
        for name in ("k12", "k21", "k23", "k31"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"InstantRates.{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class G2Params:
    """Parameters of g2(t) = 1 - (1 + a) exp(-|t|/tau1) + a exp(-|t|/tau2)."""

    a: float
    tau1: float
    tau2: float

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("G2Params: tau1 and tau2 must be > 0")
        if self.a < 0:
            raise ValueError("G2Params: a must be >= 0")
        if self.tau2 < self.tau1:
            raise ValueError("G2Params: tau2 must be >= tau1")

    @property
    def lambda1(self) -> float:
        return 1.0 / self.tau1

    @property
    def lambda2(self) -> float:
        return 1.0 / self.tau2

    @classmethod
    def from_rates(cls, a: float, lambda1: float, lambda2: float) -> "G2Params":
        return cls(a=a, tau1=1.0 / lambda1, tau2=1.0 / lambda2)


@dataclass(frozen=True)
class Populations:
    p1: float
    p2: float
    p3: float

    def __post_init__(self):
        for v in (self.p1, self.p2, self.p3):
            if not (-1e-15 <= v <= 1 + 1e-15):
                raise ValueError(f"population {v} outside [0, 1]")
        if abs(self.p1 + self.p2 + self.p3 - 1.0) > 1e-12:
            raise ValueError("populations must sum to 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3])


def rates_at_power(model: RateModel, power: float) -> InstantRates:
    if not power >= 0:
        raise ValueError(f"power must be >= 0, got {power}")
    return InstantRates(
        k12=model.alpha * power,
        k21=model.k21,
        k23=model.k23,
        k31=model.k31_0 * (1.0 + model.beta * power),
    )


def steady_state(rates: InstantRates) -> Populations:
    """Stationary populations of the master equation."""
    k12, k21, k23, k31 = rates.k12, rates.k21, rates.k23, rates.k31
    if k31 == 0 and k23 > 0:
        raise ValueError("k31 = 0 with k23 > 0: all population ends up shelved")
    if not (k12 > 0 and k21 > 0 and k31 > 0):
        raise ValueError("steady_state requires k12, k21, k31 > 0")
    det = k31 * (k12 + k21 + k23) + k12 * k23
    p2 = k12 * k31 / det
    p3 = k12 * k23 / det
    p1 = (k31 * (k21 + k23)) / det
    return Populations(p1, p2, p3)


def generator_matrix(rates: InstantRates) -> np.ndarray:
    """Master-equation generator Q with dp/dt = Q @ p, p = (p1, p2, p3)."""
    k12, k21, k23, k31 = rates.k12, rates.k21, rates.k23, rates.k31
    return np.array([
        [-k12, k21, k31],
        [k12, -(k21 + k23), 0.0],
        [0.0, k23, -k31],
    ])


def decay_rates(k12, k21, k23, k31):
    """Eigen-decay rates and bunching amplitude without validation.

    Returns ``(lambda1, lambda2, a)`` with lambda1 >= lambda2.  Works on
    scalars or broadcastable arrays; a complex spectrum yields NaN.
    """
    s = k12 + k21 + k23
    trace = s + k31
    det = k31 * s + k12 * k23
    disc = (s - k31) ** 2 - 4.0 * k12 * k23
    root = np.sqrt(disc)
    lam1 = 0.5 * (trace + root)
    lam2 = det / lam1
    a = lam1 * (lam2 - k31) / (k31 * (lam1 - lam2))
    return lam1, lam2, a


def analytic_g2(rates: InstantRates) -> G2Params:
    """Closed-form g2 parameters of the three-level model.

    After a detection the emitter sits in |1>, so g2(t) = p2(t) / p2(inf) with
    p(0) = (1, 0, 0).  Reducing to (p2, p3) gives a 2x2 linear system whose
    eigenvalues are -lambda1, -lambda2.  Matching p2(0) = 0 and
    dp2/dt(0) = k12 fixes the expansion coefficients, which gives

        a = lambda1 (lambda2 - k31) / (k31 (lambda1 - lambda2)).
    """
    k12, k21, k23, k31 = rates.k12, rates.k21, rates.k23, rates.k31
    if not (k12 > 0 and k21 > 0 and k31 > 0):
        raise ValueError("analytic_g2 requires k12, k21, k31 > 0")
    s = k12 + k21 + k23
    trace = s + k31
    disc = (s - k31) ** 2 - 4.0 * k12 * k23
    if disc < DEGENERACY_TOL * trace * trace:
        raise DegenerateSpectrumError(
            f"eigen-decay rates are degenerate (discriminant {disc:.3g})")
    if k23 == 0:
        # two-level: the k31 mode is never excited
        lam1 = s
        return G2Params(a=0.0, tau1=1.0 / lam1, tau2=max(1.0 / k31, 1.0 / lam1))
    lam1, lam2, a = decay_rates(k12, k21, k23, k31)
    if k31 >= lam1:
        raise ValueError(
            "deshelving rate k31 exceeds the antibunching rate; "
            "the shelving state is not metastable")
    return G2Params(a=float(a), tau1=1.0 / float(lam1), tau2=1.0 / float(lam2))


def rates_from_g2(params: G2Params, k12: float) -> InstantRates:
    """Invert :func:`analytic_g2` for a chosen pump rate k12.

    (a, lambda1, lambda2) fix three of the four rates once k12 is given.
    Raises ``ValueError`` when the implied k21 or k23 is negative.
    """
    lam1, lam2, a = params.lambda1, params.lambda2, params.a
    k31 = lam1 * lam2 / (a * (lam1 - lam2) + lam1)
    s = lam1 + lam2 - k31
    k23 = (lam1 * lam2 - k31 * s) / k12
    k21 = s - k12 - k23
    if k23 < -1e-12 * s or k21 <= 0:
        raise ValueError(f"k12 = {k12} is incompatible with {params}")
    return InstantRates(k12=k12, k21=k21, k23=max(k23, 0.0), k31=k31)


def eval_g2(params: G2Params, tau):
    """Evaluate the three-level g2 at lag(s) ``tau`` (ns); even in tau."""
    t = np.abs(tau)
    a = params.a
    return 1.0 - (1.0 + a) * np.exp(-t / params.tau1) + a * np.exp(-t / params.tau2)


def excited_state_lifetime(model: RateModel) -> float:
    total = model.k21 + model.k23
    if total <= 0:
        raise ValueError("k21 + k23 must be > 0")
    return 1.0 / total


def metastable_lifetime(model: RateModel) -> float:
    if model.k31_0 <= 0:
        raise ValueError("k31_0 must be > 0")
    return 1.0 / model.k31_0


def transform_limited_linewidth(lifetime: float) -> float:
    """Fourier-limited linewidth hbar / tau in ueV for a lifetime in ns."""
    if not lifetime > 0:
        raise ValueError(f"lifetime must be > 0, got {lifetime}")
    return HBAR_UEV_NS / lifetime


def predicted_intensity(model: RateModel, power, detection_efficiency: float = 1.0):
    """Detected photon rate eta * k21 * p2(P), returned in counts/s.

    Accepts a scalar or array of powers.  Closed form of p2 gives a
    hyperbola in P when beta = 0:  I(P) = I_inf * P / (P + P_sat) with
    I_inf = eta k21 k31 / (k31 + k23) and P_sat = k31 (k21 + k23) / (alpha (k31 + k23)).
    """
    if not 0 < detection_efficiency <= 1:
        raise ValueError("detection_efficiency must be in (0, 1]")
    p = np.asarray(power, dtype=float)
    if np.any(p < 0):
        raise ValueError("power must be >= 0")
    k12 = model.alpha * p
    k31 = model.k31_0 * (1.0 + model.beta * p)
    den = k31 * (k12 + model.k21 + model.k23) + k12 * model.k23
    with np.errstate(invalid="ignore", divide="ignore"):
        p2 = np.where(den > 0, k12 * k31 / np.where(den > 0, den, 1.0), 0.0)
    rate = detection_efficiency * model.k21 * p2 * 1e9
    return float(rate) if np.ndim(rate) == 0 else rate


def saturation_parameters(model: RateModel, detection_efficiency: float = 1.0):
    """(I_inf counts/s, P_sat uW) of the beta = 0 hyperbola."""
    if model.beta != 0:
        raise ValueError("closed-form saturation parameters need beta = 0")
    if model.alpha <= 0 or model.k31_0 <= 0:
        raise ValueError("need alpha > 0 and k31_0 > 0")
    k21, k23, k31 = model.k21, model.k23, model.k31_0
    i_inf = detection_efficiency * k21 * k31 / (k31 + k23) * 1e9
    p_sat = k31 * (k21 + k23) / (model.alpha * (k31 + k23))
    return i_inf, p_sat


# Rate coefficients of three characterized GaN emitters (alpha in 1/(ns uW)),
# their zero-phonon-line energies (eV) at room temperature, where the rates
# were measured, and at 4 K together with the 4 K linewidth (meV), and the g2
# parameters measured at 4 K and one power.
REFERENCE_EMITTERS = {
    "E1": RateModel(k21=0.678, k23=0.127, k31_0=0.024, alpha=9.27e-4, beta=0.0),
    "E2": RateModel(k21=0.268, k23=0.046, k31_0=0.021, alpha=3.31e-4, beta=3.29e-5),
    "E3": RateModel(k21=1.039, k23=0.521, k31_0=0.043, alpha=1.65e-4, beta=3.49e-4),
}
REFERENCE_ZPL_RT = {"E1": 1.934, "E2": 1.818, "E3": 1.826}
REFERENCE_ZPL_4K = {"E1": 1.796, "E2": 1.852, "E3": 1.981}
REFERENCE_FWHM_4K = {"E1": 1.6, "E2": 2.4, "E3": 2.3}
REFERENCE_G2 = {
    "E1": G2Params(a=1.44, tau1=1.29, tau2=118.0),
    "E2": G2Params(a=1.71, tau1=1.55, tau2=73.2),
    "E3": G2Params(a=0.12, tau1=0.76, tau2=35.3),
}
