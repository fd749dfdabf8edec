"""Event-level simulation of the Bartlett-Lewis variants and exact
aggregation of the continuous-time rainfall to fixed-width bins.

Rectangular variants (BLRP, BLRPR, BLRPR_X) have a cell at the storm
origin; the storm end only stops new cells from starting. Instantaneous
variants (BLIP, BLIPR) have no cell at the storm origin, and a cell's
pulses stop at the cell end or the storm end, whichever is sooner.
"""

from __future__ import annotations

import calendar
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import HorizonNonPositive, NonDividingBin, NonPositiveParameter
from .params import (
    EXPONENTIAL,
    IntensityLaw,
    ModelParams,
    PulseDepthDependence,
    Variant,
)

WARMUP_FACTOR = 10.0
# fallback warm-up when the mean storm duration is infinite (alpha <= 1)
MAX_WARMUP = 2000.0
FIVE_MINUTES = 1.0 / 12.0


@dataclass(frozen=True)
class EventSeries:
    """Continuous-time realisation. Times are hours relative to the start of
    the scoring window ``[0, horizon)``; storms may start in the warm-up
    margin before 0."""

    params: ModelParams
    law: IntensityLaw
    dep: PulseDepthDependence
    horizon: float
    warmup: float
    storm_origin: np.ndarray
    storm_eta: np.ndarray
    storm_end: np.ndarray
    cell_storm: np.ndarray
    cell_origin: np.ndarray
    cell_end: np.ndarray
    cell_intensity: np.ndarray
    pulse_cell: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    pulse_time: np.ndarray = field(default_factory=lambda: np.empty(0))
    pulse_depth: np.ndarray = field(default_factory=lambda: np.empty(0))
    rejected: int = 0

    @property
    def variant(self) -> Variant:
        return self.params.variant

    @property
    def n_storms(self) -> int:
        return self.storm_origin.size

    @property
    def n_cells(self) -> int:
        return self.cell_origin.size


@dataclass(frozen=True)
class AggregatedSeries:
    """Rainfall depths (mm) in consecutive bins of ``h`` hours."""

    h: float
    depths: np.ndarray
    start: datetime | None = None
    month: int | None = None

    def coarsen(self, factor: int) -> "AggregatedSeries":
        n = self.depths.size // factor
        if n * factor != self.depths.size:
            raise NonDividingBin(f"{self.depths.size} bins not divisible by {factor}")
        summed = self.depths.reshape(n, factor).sum(axis=1)
        return AggregatedSeries(self.h * factor, summed, self.start, self.month)


def mean_storm_duration(p: ModelParams) -> float:
    if p.variant.random_eta:
        if p["alpha"] <= 1.0:
            return math.inf
        return p["nu"] / (p["phi"] * (p["alpha"] - 1.0))
    return 1.0 / p["gamma"]


def default_warmup(p: ModelParams) -> float:
    return min(WARMUP_FACTOR * mean_storm_duration(p), MAX_WARMUP)


def _check_simulable(p: ModelParams):
    for name in p.names:
        v = p[name]
        if v < 0 or (v == 0 and name not in ("lambda", "iota", "mu_x")):
            raise NonPositiveParameter(f"{name} must be positive, got {v}", field=name)


def _draw_eta(p, n, rng, eta_floor):
    if not p.variant.random_eta:
        return np.full(n, p["eta"])
    alpha, nu = p["alpha"], p["nu"]
    if eta_floor:
        # inverse-cdf draw from the gamma truncated to (eta_floor, inf)
        dist = stats.gamma(alpha, scale=1.0 / nu)
        lo = dist.cdf(eta_floor)
        u = lo + (1.0 - lo) * rng.random(n)
        return np.maximum(dist.ppf(u), eta_floor)
    return rng.gamma(alpha, 1.0 / nu, n)


def _draw_storms(p, law, dep, origins, rng, eta_floor=None):
    """Storm, cell and pulse arrays for storms at the given origins."""
    v = p.variant
    n = origins.size
    eta = _draw_eta(p, n, rng, eta_floor)
    if v.random_eta:
        beta, gamma = p["kappa"] * eta, p["phi"] * eta
    else:
        beta, gamma = np.full(n, p["beta"]), np.full(n, p["gamma"])
    dur = rng.exponential(1.0, n) / gamma
    n_extra = rng.poisson(beta * dur)
    if v.instantaneous:
        n_cells = n_extra
    else:
        n_cells = n_extra + 1
    cell_storm = np.repeat(np.arange(n), n_cells)
    offset = rng.random(cell_storm.size) * dur[cell_storm]
    if not v.instantaneous:
        first = np.cumsum(n_cells) - n_cells
        offset[first] = 0.0
    order = np.lexsort((offset, cell_storm))
    offset = offset[order]
    cell_origin = origins[cell_storm] + offset
    cell_eta = eta[cell_storm]
    cell_end = cell_origin + rng.exponential(1.0, cell_storm.size) / cell_eta
    out = {
        "storm_origin": origins, "storm_eta": eta, "storm_end": origins + dur,
        "cell_storm": cell_storm, "cell_origin": cell_origin, "cell_end": cell_end,
    }
    if not v.instantaneous:
        mean = cell_eta * p["iota"] if v is Variant.BLRPR_X else np.full(cell_eta.size, p["mu_x"])
        out["cell_intensity"] = law.sample(rng, mean)
        out.update(pulse_cell=np.empty(0, int), pulse_time=np.empty(0), pulse_depth=np.empty(0))
        return out
    out["cell_intensity"] = np.full(cell_storm.size, np.nan)
    stop = np.minimum(cell_end, out["storm_end"][cell_storm])
    rate = p["omega"] * cell_eta if v is Variant.BLIPR else np.full(cell_eta.size, p["xi"])
    n_pulses = rng.poisson(rate * (stop - cell_origin))
    pulse_cell = np.repeat(np.arange(cell_storm.size), n_pulses)
    span = (stop - cell_origin)[pulse_cell]
    pulse_time = cell_origin[pulse_cell] + rng.random(pulse_cell.size) * span
    if PulseDepthDependence(dep) is PulseDepthDependence.COMMON:
        depth = law.sample(rng, np.full(cell_storm.size, p["mu_x"]))[pulse_cell]
    else:
        depth = law.sample(rng, np.full(pulse_cell.size, p["mu_x"]))
    out.update(pulse_cell=pulse_cell, pulse_time=pulse_time, pulse_depth=depth)
    return out


def simulate(p: ModelParams, law: IntensityLaw = EXPONENTIAL,
             dep: PulseDepthDependence = PulseDepthDependence.INDEPENDENT,
             horizon: float = 744.0, seed=None, *, rng: np.random.Generator | None = None,
             warmup: float | None = None, eta_floor: float | None = None) -> EventSeries:
    """Simulate ``horizon`` hours of the model.

    Storms are generated from ``-warmup`` so the scoring window starts in
    the stationary regime (default warm-up: ten mean storm durations).
    ``eta_floor`` switches to a gamma distribution for eta truncated below.
    """
    if not horizon > 0:
        raise HorizonNonPositive(f"horizon must be positive, got {horizon}")
    _check_simulable(p)
    rng = rng if rng is not None else np.random.default_rng(seed)
    warmup = default_warmup(p) if warmup is None else float(warmup)
    span = horizon + warmup
    n = rng.poisson(p["lambda"] * span)
    origins = np.sort(rng.random(n)) * span - warmup
    arrays = _draw_storms(p, law, PulseDepthDependence(dep), origins, rng, eta_floor)
    return EventSeries(p, law, PulseDepthDependence(dep), float(horizon), warmup, **arrays)


def _n_bins(horizon: float, h: float) -> int:
    if not h > 0:
        raise NonDividingBin(f"bin width must be positive, got {h}")
    ratio = horizon / h
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise NonDividingBin(f"bin width {h} does not divide horizon {horizon}")
    return n


def aggregate(e: EventSeries, h: float) -> AggregatedSeries:
    """Exact bin totals over ``[0, horizon)``: the integral of the intensity
    for rectangular cells, the sum of pulse depths for instantaneous ones."""
    n = _n_bins(e.horizon, h)
    if e.variant.instantaneous:
        t = e.pulse_time
        keep = (t >= 0) & (t < e.horizon)
        idx = np.minimum((t[keep] / h).astype(np.int64), n - 1)
        return AggregatedSeries(h, np.bincount(idx, e.pulse_depth[keep], n))
    return AggregatedSeries(h, _integrate_cells(e.cell_origin, e.cell_end, e.cell_intensity, e.horizon, h, n))


def _integrate_cells(t0, t1, x, horizon, h, n):
    t0 = np.maximum(t0, 0.0)
    t1 = np.minimum(t1, horizon)
    keep = (t1 > t0) & (x > 0)
    t0, t1, x = t0[keep], t1[keep], x[keep]
    j0 = np.minimum((t0 / h).astype(np.int64), n - 1)
    j1 = np.minimum((t1 / h).astype(np.int64), n)
    same = j0 == j1
    # bincount with empty weights returns integers
    depth = np.bincount(j0[same], x[same] * (t1[same] - t0[same]), n + 1).astype(float)
    d = ~same
    j0d, j1d, xd = j0[d], j1[d], x[d]
    depth += np.bincount(j0d, xd * ((j0d + 1) * h - t0[d]), n + 1)
    depth += np.bincount(j1d, xd * (t1[d] - j1d * h), n + 1)
    # fully covered bins j0+1 .. j1-1
    rate = np.bincount(j0d + 1, xd, n + 2) - np.bincount(j1d, xd, n + 2)
    active = np.cumsum(np.bincount(j0d + 1, None, n + 2) - np.bincount(j1d, None, n + 2))
    full = np.where(active > 0, np.maximum(np.cumsum(rate), 0.0), 0.0)
    depth += h * full[: n + 1]
    return depth[:n]


@dataclass(frozen=True)
class RejectionLimits:
    max_storm_duration: float | None = None
    max_cell_duration: float | None = None
    max_intensity: float | None = None  # rectangular cells only

    def is_empty(self) -> bool:
        return all(v is None for v in (self.max_storm_duration, self.max_cell_duration, self.max_intensity))


def _offending(arrays, limits, n_storms):
    """Boolean masks (storm_bad, cell_bad)."""
    storm_bad = np.zeros(n_storms, bool)
    dur = arrays["storm_end"] - arrays["storm_origin"]
    if limits.max_storm_duration is not None:
        storm_bad |= dur > limits.max_storm_duration
    cell_bad = np.zeros(arrays["cell_origin"].size, bool)
    if limits.max_cell_duration is not None:
        cell_bad |= (arrays["cell_end"] - arrays["cell_origin"]) > limits.max_cell_duration
    if limits.max_intensity is not None:
        cell_bad |= np.nan_to_num(arrays["cell_intensity"]) > limits.max_intensity
    return storm_bad, cell_bad


def _arrays(e: EventSeries) -> dict:
    return {k: getattr(e, k) for k in (
        "storm_origin", "storm_eta", "storm_end", "cell_storm", "cell_origin",
        "cell_end", "cell_intensity", "pulse_cell", "pulse_time", "pulse_depth")}


def _subset(arrays, storm_keep, cell_keep):
    cell_keep = cell_keep & storm_keep[arrays["cell_storm"]]
    storm_map = np.cumsum(storm_keep) - 1
    cell_map = np.cumsum(cell_keep) - 1
    pulse_keep = cell_keep[arrays["pulse_cell"]] if arrays["pulse_cell"].size else np.zeros(0, bool)
    out = {k: arrays[k][storm_keep] for k in ("storm_origin", "storm_eta", "storm_end")}
    out["cell_storm"] = storm_map[arrays["cell_storm"][cell_keep]]
    for k in ("cell_origin", "cell_end", "cell_intensity"):
        out[k] = arrays[k][cell_keep]
    out["pulse_cell"] = cell_map[arrays["pulse_cell"][pulse_keep]]
    out["pulse_time"] = arrays["pulse_time"][pulse_keep]
    out["pulse_depth"] = arrays["pulse_depth"][pulse_keep]
    return out


def _concat(a, b):
    out = {}
    for k in ("storm_origin", "storm_eta", "storm_end"):
        out[k] = np.concatenate([a[k], b[k]])
    ns = a["storm_origin"].size
    nc = a["cell_origin"].size
    out["cell_storm"] = np.concatenate([a["cell_storm"], b["cell_storm"] + ns])
    for k in ("cell_origin", "cell_end", "cell_intensity", "pulse_time", "pulse_depth"):
        out[k] = np.concatenate([a[k], b[k]])
    out["pulse_cell"] = np.concatenate([a["pulse_cell"], b["pulse_cell"] + nc])
    # restore storm order by origin
    order = np.argsort(out["storm_origin"], kind="stable")
    keep = np.ones(order.size, bool)
    sub = _subset(out, keep, np.ones(out["cell_origin"].size, bool))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    for k in ("storm_origin", "storm_eta", "storm_end"):
        sub[k] = sub[k][order]
    sub["cell_storm"] = inv[sub["cell_storm"]]
    corder = np.lexsort((sub["cell_origin"], sub["cell_storm"]))
    cinv = np.empty_like(corder)
    cinv[corder] = np.arange(corder.size)
    for k in ("cell_storm", "cell_origin", "cell_end", "cell_intensity"):
        sub[k] = sub[k][corder]
    sub["pulse_cell"] = cinv[sub["pulse_cell"]]
    return sub


def rejection_filter(e: EventSeries, limits: RejectionLimits | None = None,
                     policy: str = "remove", seed=None, max_rounds: int = 100) -> EventSeries:
    """Drop (``policy="remove"``) or redraw (``policy="resample"``) storms
    and cells beyond the given limits. ``rejected`` on the result counts the
    storms and cells removed, or the storm redraws performed.

    Removal acts at the level of the offence: over-long storms are dropped
    with their cells, over-long or over-intense cells are dropped alone.
    Resampling redraws the whole storm at the same origin until it passes.
    """
    if limits is None or limits.is_empty():
        return e
    arrays = _arrays(e)
    storm_bad, cell_bad = _offending(arrays, limits, e.n_storms)
    if policy == "remove":
        count = int(storm_bad.sum() + (cell_bad & ~storm_bad[arrays["cell_storm"]]).sum())
        kept = _subset(arrays, ~storm_bad, ~cell_bad)
        return replace(e, rejected=e.rejected + count, **kept)
    if policy != "resample":
        raise ValueError(f"unknown rejection policy {policy!r}")
    rng = np.random.default_rng(seed)
    count = 0
    for _ in range(max_rounds):
        bad = storm_bad.copy()
        np.logical_or.at(bad, arrays["cell_storm"][cell_bad], True)
        if not bad.any():
            break
        count += int(bad.sum())
        good = _subset(arrays, ~bad, np.ones(arrays["cell_origin"].size, bool))
        fresh = _draw_storms(e.params, e.law, e.dep, arrays["storm_origin"][bad], rng)
        arrays = _concat(good, fresh)
        storm_bad, cell_bad = _offending(arrays, limits, arrays["storm_origin"].size)
    else:
        # give up on storms that keep failing: remove them
        bad = storm_bad.copy()
        np.logical_or.at(bad, arrays["cell_storm"][cell_bad], True)
        arrays = _subset(arrays, ~bad, np.ones(arrays["cell_origin"].size, bool))
    return replace(e, rejected=e.rejected + count, **arrays)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...)."""
    return np.random.default_rng([int(seed), *map(int, key)])


def simulate_periods(p: ModelParams, n_periods: int, period_hours: float,
                     law: IntensityLaw = EXPONENTIAL,
                     dep: PulseDepthDependence = PulseDepthDependence.INDEPENDENT,
                     h: float = FIVE_MINUTES, seed: int = 0, chunk_periods: int = 100,
                     limits: RejectionLimits | None = None) -> np.ndarray:
    """Aggregated depths for ``n_periods`` consecutive periods (e.g. Januaries)
    as an array of shape ``(n_periods, period_hours / h)``.

    Periods are simulated as one continuous record in chunks of
    ``chunk_periods``; each chunk has its own warm-up and substream.
    """
    bins = _n_bins(period_hours, h)
    out = np.empty((n_periods, bins))
    for c, first in enumerate(range(0, n_periods, chunk_periods)):
        m = min(chunk_periods, n_periods - first)
        e = simulate(p, law, dep, m * period_hours, rng=substream(seed, c))
        e = rejection_filter(e, limits)
        out[first:first + m] = aggregate(e, h).depths.reshape(m, bins)
    return out


def month_hours(year: int, month: int) -> float:
    return 24.0 * calendar.monthrange(year, month)[1]


def simulate_calendar(params: Mapping[int, ModelParams], years: Sequence[int],
                      law: IntensityLaw = EXPONENTIAL,
                      dep: PulseDepthDependence = PulseDepthDependence.INDEPENDENT,
                      seed: int = 0, replicate: int = 0, h: float = FIVE_MINUTES,
                      limits: RejectionLimits | None = None) -> list[AggregatedSeries]:
    """Month-by-month simulation with per-month parameters.

    Each (replicate, year, month) uses its own substream and warm-up, so
    any subset of months can be regenerated independently. Months without
    parameters are skipped.
    """
    out = []
    for yi, year in enumerate(years):
        for month in range(1, 13):
            p = params.get(month)
            if p is None:
                continue
            hours = month_hours(year, month)
            e = simulate(p, law, dep, hours, rng=substream(seed, replicate, yi, month))
            e = rejection_filter(e, limits)
            agg = aggregate(e, h)
            out.append(AggregatedSeries(h, agg.depths, datetime(year, month, 1), month))
    return out
