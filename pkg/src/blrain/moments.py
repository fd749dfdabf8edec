"""Closed-form moments of the aggregated rainfall process for the
random-eta models BLIPR and BLRPR_X, and the derived fitting properties.

Every expression is an expectation over the per-storm cell duration rate
``eta ~ Gamma(alpha, rate=nu)`` and is built from the kernel
``E[eta^-k exp(-eta s)]`` (:func:`gamma_expectation`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import AlphaTooSmall, ParameterError, ZeroVariance
from .params import (
    EXPONENTIAL,
    IntensityLaw,
    ModelParams,
    PulseDepthDependence,
    Variant,
    intensity_moments,
)

POLE_GUARD = 1e-6
# half-width of the interpolation window around removable singularities in phi
PHI_POLE_WIDTH = 1e-3

DEFAULT_TIMESCALES = (1.0 / 12.0, 1.0, 6.0, 24.0)


def gamma_expectation(k, s, alpha, nu):
    """E[eta^-k exp(-eta s)] for eta ~ Gamma(alpha, rate nu).

    Equal to ``nu^alpha Gamma(alpha-k) / (Gamma(alpha) (nu+s)^(alpha-k))``,
    evaluated in log space. ``s`` may be an array.
    """
    if alpha - k <= POLE_GUARD:
        raise AlphaTooSmall(f"alpha={alpha} must exceed k={k}", field="alpha")
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("s must be non-negative")
    logv = alpha * math.log(nu) + math.lgamma(alpha - k) - math.lgamma(alpha)
    out = np.exp(logv - (alpha - k) * np.log(nu + s))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AggregatedMoments:
    h: float
    mean: float
    variance: float
    autocov: Mapping[int, float] = field(default_factory=dict)
    third_central: float = 0.0


def _regularized(fn, phi, poles):
    """Evaluate ``fn(phi)``, interpolating linearly across removable poles."""
    for pole in poles:
        if abs(phi - pole) < PHI_POLE_WIDTH:
            lo = fn(pole - PHI_POLE_WIDTH)
            hi = fn(pole + PHI_POLE_WIDTH)
            t = (phi - pole + PHI_POLE_WIDTH) / (2 * PHI_POLE_WIDTH)
            return (1 - t) * lo + t * hi
    return fn(phi)


# Third central moment of BLRPR_X, transcribed as
#   lambda mu_c iota^3 / ((1+phi)^2 (phi^4-2phi^3-3phi^2+8phi-4) phi^3)
#     * sum over kernels K of K * sum_j c_j phi^a kappa^b f1^c f2^d h^e
# Kernel key (k, s) means E[eta^-k exp(-eta s h)] with s in {"1", "phi",
# "0", "2", "1+phi"}; None is the kernel-free bracket.
# Monomials are (coef, phi power, kappa power, f1 power, f2 power, h power).
THIRD_MOMENT_TERMS = {
    (1, "1"): (
        (12, 7, 2, 0, 0, 0), (-24, 2, 1, 1, 0, 0), (-18, 4, 2, 0, 0, 0),
        (24, 3, 1, 1, 0, 0), (-132, 6, 1, 1, 0, 0), (150, 4, 1, 1, 0, 0),
        (-42, 5, 2, 0, 0, 0), (-6, 5, 1, 1, 0, 0), (108, 5, 0, 0, 1, 0),
        (-72, 7, 0, 0, 1, 0), (-48, 3, 0, 0, 1, 0), (24, 8, 1, 1, 0, 0),
        (12, 3, 2, 0, 0, 0), (12, 9, 0, 0, 1, 0),
    ),
    (0, "1"): (
        (24, 4, 1, 1, 0, 1), (6, 9, 0, 0, 1, 1), (-30, 6, 1, 1, 0, 1),
        (6, 8, 1, 1, 0, 1), (54, 5, 0, 0, 1, 1), (-24, 3, 0, 0, 1, 1),
        (-36, 7, 0, 0, 1, 1),
    ),
    (1, "phi"): (
        (-48, 0, 2, 0, 0, 0), (6, 4, 1, 1, 0, 0), (-48, 1, 1, 1, 0, 0),
        (6, 5, 2, 0, 0, 0), (-24, 2, 1, 1, 0, 0), (36, 3, 1, 1, 0, 0),
        (-6, 5, 1, 1, 0, 0), (84, 2, 2, 0, 0, 0), (12, 3, 2, 0, 0, 0),
        (-18, 4, 2, 0, 0, 0),
    ),
    (0, "phi"): (
        (-24, 1, 2, 0, 0, 1), (30, 3, 2, 0, 0, 1), (-6, 5, 2, 0, 0, 1),
    ),
    (1, "0"): (
        (72, 7, 0, 0, 1, 0), (48, 1, 1, 1, 0, 0), (24, 2, 1, 1, 0, 0),
        (-36, 3, 1, 1, 0, 0), (-84, 2, 2, 0, 0, 0), (6, 5, 1, 1, 0, 0),
        (117, 6, 1, 1, 0, 0), (39, 5, 2, 0, 0, 0), (-12, 9, 0, 0, 1, 0),
        (-138, 4, 1, 1, 0, 0), (48, 0, 2, 0, 0, 0), (-9, 7, 2, 0, 0, 0),
        (48, 3, 0, 0, 1, 0), (18, 4, 2, 0, 0, 0), (-21, 8, 1, 1, 0, 0),
        (-12, 3, 2, 0, 0, 0), (-108, 5, 0, 0, 1, 0),
    ),
    None: (
        (-24, 1, 2, 0, 0, 1), (-72, 6, 1, 1, 0, 1), (-36, 5, 2, 0, 0, 1),
        (54, 3, 2, 0, 0, 1), (6, 7, 2, 0, 0, 1), (54, 5, 0, 0, 1, 1),
        (-36, 7, 0, 0, 1, 1), (-24, 3, 0, 0, 1, 1), (-48, 2, 1, 1, 0, 1),
        (12, 8, 1, 1, 0, 1), (6, 9, 0, 0, 1, 1), (108, 4, 1, 1, 0, 1),
    ),
    (1, "2"): (
        (-12, 4, 1, 1, 0, 0), (-3, 8, 1, 1, 0, 0), (15, 6, 1, 1, 0, 0),
        (-3, 7, 2, 0, 0, 0), (3, 5, 2, 0, 0, 0),
    ),
    (1, "1+phi"): (
        (-24, 3, 1, 1, 0, 0), (-6, 4, 1, 1, 0, 0), (6, 5, 1, 1, 0, 0),
        (24, 2, 1, 1, 0, 0), (18, 4, 2, 0, 0, 0), (-12, 3, 2, 0, 0, 0),
        (-6, 5, 2, 0, 0, 0),
    ),
}

_KERNEL_KEYS = tuple(THIRD_MOMENT_TERMS)
_TERMS = np.array(
    [(i,) + t for i, key in enumerate(_KERNEL_KEYS) for t in THIRD_MOMENT_TERMS[key]],
    dtype=float,
).T
_T_KERNEL = _TERMS[0].astype(int)
_T_COEF, _T_PHI, _T_KAPPA, _T_F1, _T_F2 = _TERMS[1:6]
_T_SLOT = 2 * _T_KERNEL + _TERMS[6].astype(int)
_KERNEL_K = np.array([0 if key is None else key[0] for key in _KERNEL_KEYS])
_KERNEL_FREE = np.array([key is None for key in _KERNEL_KEYS])


def _kernel_shifts(phi):
    table = {"1": 1.0, "phi": phi, "0": 0.0, "2": 2.0, "1+phi": 1.0 + phi}
    return np.array([0.0 if key is None else table[key[1]] for key in _KERNEL_KEYS])


def _gamma_kernels(k, s, alpha, nu):
    """Vectorised E[eta^-k exp(-eta s)] for integer array ``k`` broadcast with ``s``."""
    lg = np.where(k == 0, 0.0, math.lgamma(alpha - 1.0) - math.lgamma(alpha))
    return np.exp(alpha * math.log(nu) + lg - (alpha - k) * np.log(nu + s))


def _blrprx_third(phi, kappa, f1, f2, h, alpha, nu):
    h = np.asarray(h, dtype=float)
    w = _T_COEF * phi**_T_PHI * kappa**_T_KAPPA * f1**_T_F1 * f2**_T_F2
    coef = np.bincount(_T_SLOT, w, minlength=2 * len(_KERNEL_KEYS)).reshape(-1, 2)
    kern = _gamma_kernels(_KERNEL_K[:, None], _kernel_shifts(phi)[:, None] * h[None, :], alpha, nu)
    kern[_KERNEL_FREE] = 1.0
    total = np.sum(kern * (coef[:, :1] + coef[:, 1:] * h[None, :]), axis=0)
    den = (1 + phi) ** 2 * (phi**4 - 2 * phi**3 - 3 * phi**2 + 8 * phi - 4) * phi**3
    return total / den


def _blrprx_second(phi, kappa, f1, h, alpha, nu, lags):
    """Variance bracket and lag-k covariance brackets (without lambda mu_c iota^2)."""
    h = np.asarray(h, dtype=float)
    lags = np.asarray(list(lags), dtype=float)
    a_fast = f1 + kappa * phi / (phi**2 - 1)
    b_slow = kappa / (phi**2 * (phi**2 - 1))
    # rows: E[1/eta], E[exp(-phi eta h)/eta], E[exp(-eta h)/eta]
    base = _gamma_kernels(1, np.stack([0.0 * h, phi * h, h]), alpha, nu)
    var = 2 * (
        (f1 + kappa / phi) * h
        + base[0] * (kappa * (1 - phi**3) / (phi**2 * (phi**2 - 1)) - f1)
        - base[1] * b_slow
        + base[2] * a_fast
    )
    if lags.size == 0:
        return var, np.empty((0, h.size))
    steps = np.stack([lags - 1, lags, lags + 1])[:, :, None] * h[None, None, :]
    fast = _gamma_kernels(1, steps, alpha, nu)
    slow = _gamma_kernels(1, phi * steps, alpha, nu)
    second_diff = lambda g: g[0] - 2 * g[1] + g[2]  # noqa: E731
    return var, a_fast * second_diff(fast) - b_slow * second_diff(slow)


def _check_alpha(alpha):
    if alpha - 1.0 <= POLE_GUARD:
        raise AlphaTooSmall(f"alpha={alpha} too close to 1", field="alpha")


def blrprx_moments(p: ModelParams, law: IntensityLaw = EXPONENTIAL, h: float = 1.0,
                   max_lag: int = 1) -> AggregatedMoments:
    """Mean, variance, lag-1..max_lag autocovariances and third central
    moment of the BLRPR_X process aggregated over intervals of ``h`` hours."""
    if p.variant is not Variant.BLRPR_X:
        raise ParameterError(f"expected BLRPR_X parameters, got {p.variant.value}")
    out = _blrprx_arrays(p, law, np.array([h]), max_lag)
    return AggregatedMoments(
        h, float(out["mean"][0]), float(out["variance"][0]),
        {k: float(c[0]) for k, c in zip(range(1, max_lag + 1), out["autocov"])},
        float(out["third"][0]),
    )


def _blrprx_arrays(p, law, h, max_lag):
    lam, iota, alpha, nu, kappa, phi = (p[n] for n in p.names)
    _check_alpha(alpha)
    f1 = law.raw_moment_ratio(2)
    f2 = law.raw_moment_ratio(3)
    mu_c = 1.0 + kappa / phi
    lags = range(1, max_lag + 1)

    def second(ph):
        var, covs = _blrprx_second(ph, kappa, f1, h, alpha, nu, lags)
        return np.concatenate([var[None, :], covs])

    sec = _regularized(second, phi, (1.0,))
    third = _regularized(lambda ph: _blrprx_third(ph, kappa, f1, f2, h, alpha, nu), phi, (1.0, 2.0))
    scale2 = lam * mu_c * iota**2
    return {
        "mean": lam * iota * mu_c * h,
        "variance": scale2 * sec[0],
        "autocov": [scale2 * row for row in sec[1:]],
        "third": lam * mu_c * iota**3 * third,
    }


def blipr_moments(p: ModelParams, law: IntensityLaw = EXPONENTIAL,
                  dep: PulseDepthDependence = PulseDepthDependence.COMMON,
                  h: float = 1.0, max_lag: int = 1) -> AggregatedMoments:
    """Moments of the BLIPR process aggregated over intervals of ``h`` hours.

    ``law`` supplies the shape of the pulse-depth distribution; its mean is
    taken from ``p["mu_x"]``.
    """
    if p.variant is not Variant.BLIPR:
        raise ParameterError(f"expected BLIPR parameters, got {p.variant.value}")
    out = _blipr_arrays(p, law, dep, np.array([h]), max_lag)
    return AggregatedMoments(
        h, float(out["mean"][0]), float(out["variance"][0]),
        {k: float(c[0]) for k, c in zip(range(1, max_lag + 1), out["autocov"])},
        float(out["third"][0]),
    )


def _blipr_arrays(p, law, dep, h, max_lag):
    lam, mu, alpha, nu, kappa, phi, omega = (p[n] for n in p.names)
    _check_alpha(alpha)
    m = intensity_moments(law.with_mean(mu))
    ex2, ex3 = m.m2, m.m3
    exx, exxx, ex2x = PulseDepthDependence(dep).product_moments(m)
    mu_p = kappa * omega / (phi * (phi + 1))
    am = alpha - 1.0
    inv = nu / am  # E[1/eta]

    def g1(s):  # E[eta^-1 exp(-eta s)]
        return inv * (nu / (nu + s)) ** am

    def g0(s):  # E[exp(-eta s)]
        return (nu / (nu + s)) ** alpha

    slow = mu**2 * kappa / phi**2  # storm-level (rate phi*eta) term
    fast = exx - mu**2 * kappa * phi / (phi + 2)  # within-cell (rate (1+phi)*eta) term
    var = lam * mu_p * (
        ex2 * h
        + 2 * omega * slow * (g1(phi * h) - inv + phi * h)
        + 2 * omega / (phi + 1) ** 2 * fast * (g1((phi + 1) * h) - inv + (phi + 1) * h)
    )
    covs = []
    for k in range(1, max_lag + 1):
        s_term = g1(phi * (k - 1) * h) - 2 * g1(phi * k * h) + g1(phi * (k + 1) * h)
        r = phi + 1
        f_term = g1(r * (k - 1) * h) - 2 * g1(r * k * h) + g1(r * (k + 1) * h)
        covs.append(lam * mu_p * omega * (slow * s_term + fast / r**2 * f_term))

    P = phi
    third = lam * kappa * omega**3 * (
        6 / (1 + P) ** 3 * (exxx / P + 2 * exx * mu * kappa / (P * (2 + P)) - mu**3 * kappa**2 / (2 + P))
        * (h - 2 * inv / (1 + P) + 2 / (1 + P) * g1((1 + P) * h) + h * g0((1 + P) * h))
        + 6 / ((1 + P) * (2 + P) ** 2) * (-2 * exx * mu * kappa / (1 + P) + mu**3 * kappa**2 / (3 + P))
        * (h - inv * (3 + 2 * P) / ((1 + P) * (2 + P))
           + (2 + P) / (1 + P) * g1((1 + P) * h) - (1 + P) / (2 + P) * g1((2 + P) * h))
        + 6 * mu**3 * kappa**2 / (P**3 * (1 + P))
        * (h - 2 * inv / P + 2 / P * g1(P * h) + h * g0(P * h))
        + 6 / (P * (1 + P) ** 2) * (2 * exx * mu * kappa / P - mu**3 * kappa**2 / (2 + P))
        * (h - inv * (1 + 2 * P) / (P * (1 + P)) + (1 + P) / P * g1(P * h) - P / (1 + P) * g1((1 + P) * h))
        + 6 * ex2x / (omega * P * (1 + P) ** 2)
        * (h - (inv - g1((1 + P) * h)) / (1 + P))
        + 6 * ex2 * mu * kappa / (omega * P**2 * (1 + P))
        * (h - inv / P + g1(P * h) / P
           - P**2 / ((1 + P) * (2 + P)) * (h - inv / (1 + P) + g1((1 + P) * h) / (1 + P)))
        + ex3 * h / (omega**2 * P * (1 + P))
    )
    return {"mean": lam * mu_p * mu * h, "variance": var, "autocov": covs, "third": third}


def _moment_arrays(p, law, dep, h, max_lag):
    if p.variant is Variant.BLRPR_X:
        return _blrprx_arrays(p, law, h, max_lag)
    if p.variant is Variant.BLIPR:
        return _blipr_arrays(p, law, dep, h, max_lag)
    raise ParameterError(
        f"no closed-form moments for {p.variant.value}; use the simulator"
    )


def aggregated_moments(p: ModelParams, law: IntensityLaw = EXPONENTIAL,
                       dep: PulseDepthDependence = PulseDepthDependence.COMMON,
                       timescales: Sequence[float] = DEFAULT_TIMESCALES,
                       max_lag: int = 1) -> dict[float, AggregatedMoments]:
    """Moments at several timescales for either analytic variant."""
    h = np.asarray(timescales, dtype=float)
    out = _moment_arrays(p, law, dep, h, max_lag)
    res = {}
    for i, hi in enumerate(timescales):
        res[hi] = AggregatedMoments(
            float(hi), float(out["mean"][i]), float(out["variance"][i]),
            {k + 1: float(c[i]) for k, c in enumerate(out["autocov"])},
            float(out["third"][i]),
        )
    return res


def timescale_label(h: float) -> str:
    minutes = h * 60.0
    if minutes < 60 - 1e-9:
        return f"{round(minutes):d}min"
    return f"{h:g}h"


def property_names(timescales: Sequence[float] = DEFAULT_TIMESCALES) -> tuple[str, ...]:
    names = ["mean_1h"]
    for h in timescales:
        lab = timescale_label(h)
        names += [f"cv_{lab}", f"ac1_{lab}", f"skew_{lab}"]
    return tuple(names)


@dataclass(frozen=True)
class FittingProperties:
    """Hourly mean plus (cv, lag-1 autocorrelation, skewness) per timescale."""

    timescales: tuple[float, ...]
    values: np.ndarray

    @property
    def names(self) -> tuple[str, ...]:
        return property_names(self.timescales)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.values)))

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


def _ratios(mean, var, cov1, third):
    if not np.all(np.asarray(var) > 0):
        raise ZeroVariance("variance must be positive to form fitting properties")
    sd = np.sqrt(var)
    return sd / mean, cov1 / var, third / (var * sd)


def to_fitting_properties(moments: Mapping[float, AggregatedMoments]) -> FittingProperties:
    """Turn per-timescale moments into the fitting-property vector."""
    hs = tuple(sorted(moments))
    vals = []
    for h in hs:
        m = moments[h]
        cv, ac1, skew = _ratios(m.mean, m.variance, m.autocov.get(1, 0.0), m.third_central)
        vals.append((cv, ac1, skew))
    ref = moments[1.0] if 1.0 in moments else moments[hs[0]]
    mean_1h = ref.mean / ref.h
    flat = [mean_1h] + [v for triple in vals for v in triple]
    return FittingProperties(hs, np.array(flat, dtype=float))


def model_properties(p: ModelParams, law: IntensityLaw = EXPONENTIAL,
                     dep: PulseDepthDependence = PulseDepthDependence.COMMON,
                     timescales: Sequence[float] = DEFAULT_TIMESCALES) -> np.ndarray:
    """Fitting-property vector tau(theta) in :func:`property_names` order."""
    h = np.asarray(timescales, dtype=float)
    out = _moment_arrays(p, law, dep, h, 1)
    mean = out["mean"]
    cv, ac1, skew = _ratios(mean, out["variance"], out["autocov"][0], out["third"])
    res = np.empty(1 + 3 * h.size)
    res[0] = mean[0] / h[0]
    res[1::3], res[2::3], res[3::3] = cv, ac1, skew
    return res
