"""Single-emitter toolkit for SiV colour centres: three-level rate model,
photon-stream simulation, correlation analysis, parameter inference and
dipole emission near an interface."""

from .correlation import G2Histogram, bin_timetrace, correlate, detect_intermittence, suggest_binning
from .dipole import DipoleEnvironment, collection_efficiency, decay_rates, radiation_pattern
from .emitter_sim import SimConfig, TimestampStream, simulate
from .errors import SivPhotError
from .inference import (FitResult, PowerSeries, estimate_quantum_efficiency, fit_g2,
                        fit_power_dependence, fit_saturation)
from .rate_model import (G2Shape, LimitingValues, RateCoefficients, g2_analytic,
                         limiting_values, rates_from_limits, shape_from_rates, steady_state)

__version__ = "0.1.0"

__all__ = [
    "G2Histogram", "bin_timetrace", "correlate", "detect_intermittence", "suggest_binning",
    "DipoleEnvironment", "collection_efficiency", "decay_rates", "radiation_pattern",
    "SimConfig", "TimestampStream", "simulate", "SivPhotError",
    "FitResult", "PowerSeries", "estimate_quantum_efficiency", "fit_g2",
    "fit_power_dependence", "fit_saturation",
    "G2Shape", "LimitingValues", "RateCoefficients", "g2_analytic", "limiting_values",
    "rates_from_limits", "shape_from_rates", "steady_state",
]
