"""Bartlett-Lewis rectangular/instantaneous pulse rainfall models: analytic
aggregated moments, event simulation, empirical statistics and GMM fitting."""

from .errors import BLRainError
from .fitting import FitOptions, FitResult, ObjectiveSpec, fit, objective, profile
from .moments import aggregated_moments, blipr_moments, blrprx_moments, gamma_expectation, model_properties
from .params import (
    ConstraintSet,
    IntensityLaw,
    ModelParams,
    PulseDepthDependence,
    Variant,
    derived_properties,
    intensity_moments,
    validate_params,
)
from .simulate import aggregate, rejection_filter, simulate
from .stats import GaugeRecord, StatisticVector, annual_maxima, load_series, monthly_statistics, wet_dry_stats

__version__ = "0.1.0"

__all__ = [
    "BLRainError", "ConstraintSet", "FitOptions", "FitResult", "GaugeRecord", "IntensityLaw",
    "ModelParams", "ObjectiveSpec", "PulseDepthDependence", "StatisticVector", "Variant",
    "aggregate", "aggregated_moments", "annual_maxima", "blipr_moments", "blrprx_moments",
    "derived_properties", "fit", "gamma_expectation", "intensity_moments", "load_series",
    "model_properties", "monthly_statistics", "objective", "profile", "rejection_filter",
    "simulate", "validate_params", "wet_dry_stats",
]
