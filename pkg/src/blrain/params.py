"""Parameter sets, intensity laws and pulse-depth dependence for the
Bartlett-Lewis model family.

Units: hours and millimetres throughout. Rates are per hour, durations in
hours except the derived cell inter-arrival time and cell duration, which
are reported in minutes to match the usual tables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import (
    AlphaBelowMinimum,
    NonPositiveParameter,
    ParameterError,
    UnsupportedShape,
)


class Variant(str, Enum):
    BLRP = "BLRP"
    BLRPR = "BLRPR"
    BLRPR_X = "BLRPR_X"
    BLIP = "BLIP"
    BLIPR = "BLIPR"

    @property
    def random_eta(self) -> bool:
        return self in (Variant.BLRPR, Variant.BLRPR_X, Variant.BLIPR)

    @property
    def instantaneous(self) -> bool:
        return self in (Variant.BLIP, Variant.BLIPR)


PARAM_NAMES = {
    Variant.BLRP: ("lambda", "mu_x", "beta", "gamma", "eta"),
    Variant.BLRPR: ("lambda", "mu_x", "alpha", "nu", "kappa", "phi"),
    Variant.BLRPR_X: ("lambda", "iota", "alpha", "nu", "kappa", "phi"),
    Variant.BLIP: ("lambda", "mu_x", "beta", "gamma", "eta", "xi"),
    Variant.BLIPR: ("lambda", "mu_x", "alpha", "nu", "kappa", "phi", "omega"),
}

UNITS = {
    "lambda": "1/h",
    "mu_x": "mm/h (rectangular) or mm (pulse)",
    "beta": "1/h",
    "gamma": "1/h",
    "eta": "1/h",
    "xi": "1/h",
    "alpha": "1",
    "nu": "h",
    "kappa": "1",
    "phi": "1",
    "omega": "1",
    "iota": "mm",
}

# keeps the optimiser away from the Gamma(alpha - k) and nu/(alpha - 1) poles
ALPHA_GUARD = 1e-6


@dataclass(frozen=True)
class ModelParams:
    """Parameter set for one model variant and (optionally) one calendar month.

    Values are looked up by name, e.g. ``p["lambda"]``.
    """

    variant: Variant
    values: Mapping[str, float]
    month: int | None = None

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        names = PARAM_NAMES[variant]
        missing = [n for n in names if n not in self.values]
        extra = [n for n in self.values if n not in names]
        if missing or extra:
            raise ParameterError(
                f"{variant.value} expects {names}; missing {missing}, unexpected {extra}"
            )
        vals = {}
        for n in names:
            v = float(self.values[n])
            if not math.isfinite(v):
                raise ParameterError(f"{n} is not finite: {v}", field=n)
            vals[n] = v
        object.__setattr__(self, "values", MappingProxyType(vals))
        if self.month is not None and not 1 <= int(self.month) <= 12:
            raise ParameterError(f"month must be in 1..12, got {self.month}")

    def __reduce__(self):
        return (ModelParams, (self.variant, dict(self.values), self.month))

    @classmethod
    def create(cls, variant, month=None, **values) -> "ModelParams":
        return cls(Variant(variant), values, month)

    @property
    def names(self) -> tuple[str, ...]:
        return PARAM_NAMES[self.variant]

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def as_array(self) -> np.ndarray:
        return np.array([self.values[n] for n in self.names])

    def replace(self, **changes) -> "ModelParams":
        month = changes.pop("month", self.month)
        vals = dict(self.values)
        vals.update(changes)
        return ModelParams(self.variant, vals, month)

    def to_dict(self) -> dict:
        doc = {
            "variant": self.variant.value,
            "units": {n: UNITS[n] for n in self.names},
            "params": dict(self.values),
        }
        if self.month is not None:
            doc["month"] = int(self.month)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ModelParams":
        try:
            variant = Variant(doc["variant"])
            values = doc["params"]
        except (KeyError, ValueError) as exc:
            raise ParameterError(f"malformed parameter document: {exc}") from exc
        return cls(variant, dict(values), doc.get("month"))

    def to_json(self) -> str:
        # repr-precision floats so the round trip is exact
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ConstraintSet:
    """Fitting/validation constraints.

    ``alpha_min`` applies to the random-eta variants only; ``fixed`` holds
    parameters pinned at a value during fitting (e.g. ``{"mu_x": 0.001}``
    for BLIPR).
    """

    alpha_min: float = 1.0
    delta: float = ALPHA_GUARD
    fixed: Mapping[str, float] = field(default_factory=dict)


def validate_params(p: ModelParams, constraints: ConstraintSet | None = None) -> ModelParams:
    """Check positivity and the alpha lower bound; return ``p`` unchanged."""
    constraints = constraints or ConstraintSet()
    for name in p.names:
        if not p[name] > 0:
            raise NonPositiveParameter(f"{name} must be positive, got {p[name]}", field=name)
    if p.variant.random_eta:
        bound = constraints.alpha_min + constraints.delta
        if not p["alpha"] > bound:
            raise AlphaBelowMinimum(
                f"alpha must exceed {constraints.alpha_min} (+{constraints.delta:g}), got {p['alpha']}",
                field="alpha",
            )
    return p


@dataclass(frozen=True)
class DerivedProps:
    msit: float  # mean storm inter-arrival time, h
    msd: float  # mean duration of storm activity, h
    mcit: float  # mean cell inter-arrival time, min
    mcd: float  # mean cell duration, min
    mcs: float  # mean number of cells per storm
    mpc: float | None = None  # mean number of pulses per cell


def derived_properties(p: ModelParams) -> DerivedProps:
    """Physical summary properties of a (validated) parameter set."""
    v = p.variant
    msit = 1.0 / p["lambda"]
    if v.random_eta:
        alpha, nu, kappa, phi = p["alpha"], p["nu"], p["kappa"], p["phi"]
        inv_eta = nu / (alpha - 1.0)  # E[1/eta]
        msd = inv_eta / phi
        mcd = 60.0 * inv_eta
        mcit = 60.0 * inv_eta / kappa
        ratio = kappa / phi
    else:
        beta, gamma, eta = p["beta"], p["gamma"], p["eta"]
        msd = 1.0 / gamma
        mcd = 60.0 / eta
        mcit = 60.0 / beta
        ratio = beta / gamma
    if v.instantaneous:
        # no cell at the storm origin, pulses stop at min(cell end, storm end)
        mcs = ratio
        if v is Variant.BLIPR:
            mpc = p["omega"] / (1.0 + p["phi"])
        else:
            mpc = p["xi"] / (p["eta"] + p["gamma"])
        return DerivedProps(msit, msd, mcit, mcd, mcs, mpc)
    return DerivedProps(msit, msd, mcit, mcd, 1.0 + ratio)


class Family(str, Enum):
    EXPONENTIAL = "exponential"
    GAMMA = "gamma"
    WEIBULL = "weibull"


@dataclass(frozen=True)
class IntensityMoments:
    m1: float
    m2: float
    m3: float

    @property
    def f1(self) -> float:
        return self.m2 / self.m1**2

    @property
    def f2(self) -> float:
        return self.m3 / self.m1**3


@dataclass(frozen=True)
class IntensityLaw:
    """Cell intensity / pulse depth distribution, parameterised by mean and a
    fixed shape (absent for the exponential)."""

    family: Family = Family.EXPONENTIAL
    mean: float = 1.0
    shape: float | None = None

    def __post_init__(self):
        fam = Family(self.family)
        object.__setattr__(self, "family", fam)
        if fam is Family.EXPONENTIAL:
            if self.shape not in (None, 1.0):
                raise UnsupportedShape("exponential law takes no shape")
            object.__setattr__(self, "shape", None)
        elif self.shape is None or not self.shape > 0:
            raise UnsupportedShape(f"{fam.value} shape must be positive, got {self.shape}")
        if not self.mean >= 0:
            raise ParameterError(f"mean must be non-negative, got {self.mean}")

    def with_mean(self, mean: float) -> "IntensityLaw":
        return IntensityLaw(self.family, mean, self.shape)

    def raw_moment_ratio(self, r: int) -> float:
        """E(X^r) / E(X)^r."""
        if self.family is Family.EXPONENTIAL:
            return float(math.factorial(r))
        if self.family is Family.GAMMA:
            return float(np.prod([1.0 + i / self.shape for i in range(r)]))
        c = self.shape
        return float(gamma_fn(1.0 + r / c) / gamma_fn(1.0 + 1.0 / c) ** r)

    def sample(self, rng: np.random.Generator, mean) -> np.ndarray:
        """Draw one variate per entry of ``mean`` (array-like)."""
        mean = np.asarray(mean, dtype=float)
        if self.family is Family.EXPONENTIAL:
            return rng.exponential(1.0, mean.shape) * mean
        if self.family is Family.GAMMA:
            return rng.gamma(self.shape, 1.0, mean.shape) * (mean / self.shape)
        scale = mean / gamma_fn(1.0 + 1.0 / self.shape)
        return rng.weibull(self.shape, mean.shape) * scale

    def to_dict(self) -> dict:
        return {"family": self.family.value, "shape": self.shape}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "IntensityLaw":
        return cls(Family(doc.get("family", "exponential")), 1.0, doc.get("shape"))


EXPONENTIAL = IntensityLaw()


def intensity_moments(law: IntensityLaw) -> IntensityMoments:
    """First three raw moments of ``law`` at its stored mean."""
    mu = law.mean
    return IntensityMoments(mu, law.raw_moment_ratio(2) * mu**2, law.raw_moment_ratio(3) * mu**3)


class PulseDepthDependence(str, Enum):
    INDEPENDENT = "independent"
    COMMON = "common"

    def product_moments(self, m: IntensityMoments) -> tuple[float, float, float]:
        """(E[X_k X_l], E[X_k X_l X_m], E[X_k^2 X_l]) for distinct pulses of one cell."""
        if self is PulseDepthDependence.COMMON:
            return m.m2, m.m3, m.m3
        return m.m1**2, m.m1**3, m.m2 * m.m1
