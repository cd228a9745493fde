"""Three-level single-photon emitter photophysics: simulate, correlate, fit, invert."""

from .kinetics import (
    G2Params,
    InstantRates,
    Populations,
    REFERENCE_EMITTERS,
    RateModel,
    analytic_g2,
    eval_g2,
    excited_state_lifetime,
    metastable_lifetime,
    predicted_intensity,
    rates_at_power,
    steady_state,
    transform_limited_linewidth,
)

__version__ = "0.1.0"

__all__ = [
    "G2Params", "InstantRates", "Populations", "REFERENCE_EMITTERS", "RateModel", "analytic_g2",
    "eval_g2", "excited_state_lifetime", "metastable_lifetime", "predicted_intensity",
    "rates_at_power", "steady_state", "transform_limited_linewidth",
]
