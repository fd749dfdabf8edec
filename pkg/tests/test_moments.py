import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import gammaln

from blrain.errors import AlphaTooSmall, ParameterError, ZeroVariance
from blrain.moments import (
    AggregatedMoments,
    aggregated_moments,
    blipr_moments,
    blrprx_moments,
    gamma_expectation,
    model_properties,
    property_names,
    to_fitting_properties,
)
from blrain.params import IntensityLaw, PulseDepthDependence
from oracles import campbell_estimates, pulse_bin_sums, pulse_storms, rect_bin_sums, rect_storms
from reference_rows import params

HS = (1 / 12, 1.0, 6.0, 24.0)


def quad_kernel(k, s, alpha, nu):
    """E[eta^-k exp(-eta s)] by adaptive quadrature in t = (nu + s) eta."""
    a = alpha - k
    logc = alpha * math.log(nu) - gammaln(alpha) - a * math.log(nu + s)
    opts = dict(epsabs=0, epsrel=1e-13, limit=400)
    if a < 1:
        # x = t^a removes the integrable singularity at t = 0
        f = lambda x: math.exp(-x ** (1 / a))  # noqa: E731
        parts = [integrate.quad(f, 0, 1, **opts)[0], integrate.quad(f, 1, np.inf, **opts)[0]]
        return math.exp(logc) * sum(parts) / a
    f = lambda t: math.exp((a - 1) * math.log(t) - t) if t > 0 else float(a == 1)  # noqa: E731
    mode = a - 1
    parts = [integrate.quad(f, 0, mode, **opts)[0] if mode > 0 else 0.0,
             integrate.quad(f, mode, mode + 50 + 10 * math.sqrt(a), **opts)[0],
             integrate.quad(f, mode + 50 + 10 * math.sqrt(a), np.inf, **opts)[0]]
    return math.exp(logc) * sum(parts)


def test_kernel_trivial_values():
    assert gamma_expectation(0, 0.0, 3.7, 0.2) == pytest.approx(1.0, rel=1e-14)
    assert gamma_expectation(1, 0.0, 2.0, 0.5) == pytest.approx(0.5, rel=1e-14)
    assert gamma_expectation(1, 1.0, 2.0, 1.0) == pytest.approx(0.5, rel=1e-14)


def test_kernel_quadrature_example():
    assert quad_kernel(1, 1.0, 2.0, 1.0) == pytest.approx(0.5, rel=1e-10)


def test_kernel_vectorised():
    s = np.array([0.0, 0.5, 3.0])
    out = gamma_expectation(1, s, 2.5, 0.7)
    assert out.shape == (3,)
    assert out == pytest.approx([gamma_expectation(1, x, 2.5, 0.7) for x in s], rel=1e-15)


def test_kernel_rejects_pole():
    with pytest.raises(AlphaTooSmall):
        gamma_expectation(1, 0.0, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 1), st.floats(1.1, 10), st.floats(0.1, 10), st.floats(0, 100), st.floats(0, 50))
def test_kernel_decreasing_in_s(k, alpha, nu, s, ds):
    a = gamma_expectation(k, s, alpha, nu)
    b = gamma_expectation(k, s + ds, alpha, nu)
    assert 0 < b <= a * (1 + 1e-12)


def test_blipr_jan_hourly_mean():
    p = params("BLIPR", "Jan")
    m = blipr_moments(p, dep=PulseDepthDependence.COMMON, h=1.0)
    expect = p["lambda"] * p["kappa"] * p["omega"] / (p["phi"] * (p["phi"] + 1)) * p["mu_x"]
    assert m.mean == pytest.approx(expect, rel=1e-12)
    assert m.mean == pytest.approx(0.0886, abs=5e-4)


def test_blrprx_jan_hourly_mean():
    p = params("BLRPR_X", "Jan")
    m = blrprx_moments(p, h=1.0)
    assert m.mean == pytest.approx(p["lambda"] * p["iota"] * (1 + p["kappa"] / p["phi"]), rel=1e-12)
    assert m.mean == pytest.approx(0.0892, abs=5e-4)


def test_empty_processes_have_zero_moments():
    p = params("BLRPR_X", "Jan")
    for q in (p.replace(iota=0.0), p.replace(**{"lambda": 0.0})):
        m = blrprx_moments(q, h=1.0)
        assert (m.mean, m.variance, m.autocov[1], m.third_central) == (0.0, 0.0, 0.0, 0.0)
    b = params("BLIPR", "Jan").replace(**{"lambda": 0.0})
    m = blipr_moments(b, h=6.0)
    assert (m.mean, m.variance, m.autocov[1], m.third_central) == (0.0, 0.0, 0.0, 0.0)


def test_mean_linear_in_h():
    p = params("BLRPR_X", "Jul")
    ms = aggregated_moments(p, timescales=HS)
    assert [ms[h].mean / h for h in HS] == pytest.approx([ms[1.0].mean] * 4, rel=1e-12)


def test_variant_checks():
    with pytest.raises(ParameterError):
        blrprx_moments(params("BLIPR", "Jan"))
    with pytest.raises(ParameterError):
        aggregated_moments(params("BLRP", "Jan"))
    with pytest.raises(AlphaTooSmall):
        blrprx_moments(params("BLRPR_X", "Jan").replace(alpha=1.0))


def test_fitting_ratio_hand_example():
    fp = to_fitting_properties({1.0: AggregatedMoments(1.0, 2.0, 4.0, {1: 2.0}, 8.0)})
    assert fp["cv_1h"] == pytest.approx(1.0)
    assert fp["skew_1h"] == pytest.approx(1.0)
    assert fp["ac1_1h"] == pytest.approx(0.5)
    sym = to_fitting_properties({1.0: AggregatedMoments(1.0, 2.0, 4.0, {1: 2.0}, 0.0)})
    assert sym["skew_1h"] == 0.0


def test_fitting_ratio_zero_variance():
    with pytest.raises(ZeroVariance):
        to_fitting_properties({1.0: AggregatedMoments(1.0, 0.0, 0.0, {1: 0.0}, 0.0)})


@pytest.mark.parametrize("variant", ["BLRPR_X", "BLIPR"])
def test_model_properties_compose(variant):
    p = params(variant, "Jan")
    direct = model_properties(p, timescales=HS)
    composed = to_fitting_properties(aggregated_moments(p, timescales=HS))
    assert direct == pytest.approx(composed.values, rel=1e-13)
    assert composed.names == property_names(HS)


def test_exponential_equals_gamma_shape_one():
    p = params("BLRPR_X", "Mar")
    a = model_properties(p, IntensityLaw(), timescales=HS)
    b = model_properties(p, IntensityLaw("gamma", 1.0, 1.0), timescales=HS)
    assert a == pytest.approx(b, rel=1e-12)


def test_heavier_tail_raises_skewness():
    p = params("BLRPR_X", "Mar")
    a = aggregated_moments(p, IntensityLaw(), timescales=(1.0,))[1.0]
    b = aggregated_moments(p, IntensityLaw("weibull", 1.0, 0.6), timescales=(1.0,))[1.0]
    assert b.mean == pytest.approx(a.mean, rel=1e-12)
    assert b.variance > a.variance
    assert b.third_central > a.third_central


def test_short_interval_scaling():
    # for rectangular cells Var ~ h^2 and the third cumulant ~ h^3 as h -> 0
    p = params("BLRPR_X", "Jan")
    # below ~1e-4 h the closed-form third moment loses precision to cancellation
    a, b = 1e-3, 3e-4
    r = {h: aggregated_moments(p, timescales=(h,))[h] for h in (a, b)}
    assert r[a].variance / a**2 == pytest.approx(r[b].variance / b**2, rel=1e-2)
    assert r[a].third_central / a**3 == pytest.approx(r[b].third_central / b**3, rel=2e-2)


@pytest.mark.parametrize("variant", ["BLRPR_X", "BLIPR"])
def test_autocovariance_decays(variant):
    p = params(variant, "Jul")
    m = aggregated_moments(p, timescales=(1.0,), max_lag=5)[1.0]
    lags = [m.autocov[k] for k in range(1, 6)]
    assert all(c > 0 for c in lags)
    assert all(a > b for a, b in zip(lags, lags[1:]))
    assert lags[0] < m.variance


@pytest.mark.parametrize("pole", [1.0, 2.0])
def test_continuous_across_phi_poles(pole):
    base = params("BLRPR_X", "Jan")
    vals = [model_properties(base.replace(phi=pole + d), timescales=HS) for d in (-2e-3, -1e-4, 1e-4, 2e-3)]
    mid = 0.5 * (vals[0] + vals[3])
    assert vals[1] == pytest.approx(mid, rel=1e-4)
    assert vals[2] == pytest.approx(mid, rel=1e-4)


def test_blrprx_matches_storm_level_oracle():
    p = params("BLRPR_X", "Jan")
    rng = np.random.default_rng(11)
    n = 200_000
    sid, t0, t1, x = rect_storms(rng, n, p["alpha"], p["nu"], p["kappa"], p["phi"], p["iota"])
    ana = aggregated_moments(p, timescales=HS)
    for h in HS:
        est = campbell_estimates(p["lambda"], h, rect_bin_sums(rng, sid, t0, t1, x, n, h))
        m = ana[h]
        for key, value in (("mean", m.mean), ("variance", m.variance),
                           ("cov1", m.autocov[1]), ("third", m.third_central)):
            mc, se = est[key]
            assert abs(mc - value) < 4 * se, (h, key, mc, value, se)


@pytest.mark.parametrize("dep", ["common", "independent"])
def test_blipr_matches_storm_level_oracle(dep):
    p = params("BLIPR", "Jan")
    rng = np.random.default_rng(12)
    # thousands of pulses per storm: accumulate per-storm sums in batches
    per_h = {h: [] for h in HS}
    for _ in range(16):
        n = 5000
        psid, t, x, dur = pulse_storms(rng, n, p["alpha"], p["nu"], p["kappa"], p["phi"], p["omega"],
                                       p["mu_x"], dep == "common")
        for h in HS:
            per_h[h].append(pulse_bin_sums(rng, psid, t, x, dur, n, h))
    ana = aggregated_moments(p, dep=PulseDepthDependence(dep), timescales=HS)
    for h in HS:
        sums = {k: np.concatenate([s[k] for s in per_h[h]]) for k in per_h[h][0]}
        est = campbell_estimates(p["lambda"], h, sums)
        m = ana[h]
        for key, value in (("mean", m.mean), ("variance", m.variance),
                           ("cov1", m.autocov[1]), ("third", m.third_central)):
            mc, se = est[key]
            assert abs(mc - value) < 4 * se, (h, key, mc, value, se)
