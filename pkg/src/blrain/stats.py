"""Gauge-record ingestion and the empirical statistics used for fitting and
validation: monthly fitting properties with across-year variances, wet/dry
proportions and transition probabilities, and annual maxima.

Records are 5-minute depths (mm) on a lattice of timestamps. Lattice points
absent from a record, and points with an empty depth, count as missing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AllDryMonth,
    InsufficientYears,
    NegativeDepth,
    NoCompleteYears,
    NonDividingBin,
    NonMonotoneTimestamps,
    NoWetIntervals,
    ParseError,
    ZeroVariance,
)
from .moments import DEFAULT_TIMESCALES, property_names

STEP_MINUTES = 5
BINS_PER_HOUR = 60 // STEP_MINUTES
HEADER = ("timestamp", "depth_mm")
MAX_MISSING = 0.05
_STEP = np.timedelta64(STEP_MINUTES, "m")


@dataclass(frozen=True)
class GaugeRecord:
    """5-minute depths on a lattice. ``depth`` is NaN where missing."""

    times: np.ndarray  # datetime64[m], strictly increasing
    depth: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype="datetime64[m]")
        d = np.asarray(self.depth, dtype=float)
        if t.shape != d.shape or t.ndim != 1:
            raise ValueError("times and depth must be 1-d arrays of equal length")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "depth", d)

    def __len__(self):
        return self.times.size

    @classmethod
    def from_series(cls, series: Iterable) -> "GaugeRecord":
        """Concatenate 5-minute :class:`AggregatedSeries` blocks that carry
        start timestamps (e.g. the output of ``simulate_calendar``)."""
        times, depths = [], []
        for s in series:
            if abs(s.h * BINS_PER_HOUR - 1.0) > 1e-9:
                raise NonDividingBin(f"expected 5-minute bins, got h={s.h}")
            start = np.datetime64(s.start, "m")
            times.append(start + _STEP * np.arange(s.depths.size))
            depths.append(s.depths)
        if not times:
            return cls(np.empty(0, "datetime64[m]"), np.empty(0))
        t = np.concatenate(times)
        order = np.argsort(t, kind="stable")
        return cls(t[order], np.concatenate(depths)[order])

    def filled(self) -> "GaugeRecord":
        """Same record with every lattice point between first and last
        timestamp present (gaps become NaN)."""
        if len(self) == 0:
            return self
        idx = ((self.times - self.times[0]) // _STEP).astype(np.int64)
        depth = np.full(idx[-1] + 1, np.nan)
        depth[idx] = self.depth
        return GaugeRecord(self.times[0] + _STEP * np.arange(depth.size), depth)


def _parse_rows(path, rows, first_line):
    """Vectorised parse; on failure rescan row by row for the line number."""
    stamps = [r[0] if r else "" for r in rows]
    values = [r[1] if len(r) > 1 else "" for r in rows]
    try:
        if any(len(r) != 2 for r in rows):
            raise ValueError
        t = np.array(stamps, dtype="datetime64[s]")
        if np.isnat(t).any():
            raise ValueError
        d = np.array([v if v.strip() else "nan" for v in values], dtype=float)
    except ValueError:
        for i, r in enumerate(rows):
            line = first_line + i
            if len(r) != 2:
                raise ParseError(f"expected 2 fields, got {len(r)}", path, line)
            try:
                if np.isnat(np.datetime64(r[0], "s")):
                    raise ValueError
            except ValueError:
                raise ParseError(f"bad timestamp {r[0]!r}", path, line) from None
            try:
                if r[1].strip() and math.isnan(float(r[1])):
                    raise ValueError
            except ValueError:
                raise ParseError(f"bad depth {r[1]!r}", path, line) from None
        raise
    return t, d


def load_series(path, format: str = "csv") -> GaugeRecord:
    """Read a gauge CSV (header ``timestamp,depth_mm``; ISO-8601 timestamps
    on a 5-minute lattice; empty depth = missing). Gaps between the first
    and last timestamp are filled with missing values. Leading lines
    starting with ``#`` are comments."""
    if format != "csv":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != HEADER:
        raise ParseError(f"expected header {','.join(HEADER)}", path, skip + 1)
    rows = [r for r in reader]
    first = skip + 2
    # tolerate a trailing blank line
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    t, d = _parse_rows(path, rows, first)
    if t.size == 0:
        return GaugeRecord(np.empty(0, "datetime64[m]"), d)
    off = np.nonzero(t.astype("int64") % (STEP_MINUTES * 60) != 0)[0]
    if off.size:
        raise ParseError(f"timestamp {rows[off[0]][0]} is off the 5-minute lattice", path, first + off[0])
    bad = np.nonzero(np.diff(t) <= np.timedelta64(0, "s"))[0]
    if bad.size:
        raise NonMonotoneTimestamps(f"timestamp {rows[bad[0] + 1][0]} does not increase", path, first + bad[0] + 1)
    neg = np.nonzero(d < 0)[0]
    if neg.size:
        raise NegativeDepth(f"negative depth {rows[neg[0]][1]}", path, first + neg[0])
    return GaugeRecord(t.astype("datetime64[m]"), d).filled()


def format_depth(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_series(path, rec: GaugeRecord, skip_missing: bool = False, comment: str | None = None):
    """Write a record in the format :func:`load_series` reads, optionally
    preceded by a ``#`` comment line."""
    stamps = np.datetime_as_string(rec.times, unit="m")
    with Path(path).open("w", newline="") as fh:
        if comment is not None:
            fh.write("# " + comment.replace("\n", " ") + "\n")
        fh.write(",".join(HEADER) + "\n")
        for s, x in zip(stamps, rec.depth.tolist()):
            if skip_missing and math.isnan(x):
                continue
            fh.write(f"{s},{format_depth(x)}\n")


@dataclass(frozen=True)
class MonthBlock:
    year: int
    month: int
    depth: np.ndarray  # full month of 5-minute bins, NaN = missing

    @property
    def missing_fraction(self) -> float:
        return float(np.isnan(self.depth).mean())


def month_blocks(rec: GaugeRecord, month: int | None = None,
                 max_missing: float = MAX_MISSING) -> list[MonthBlock]:
    """Observation-months of a record (optionally one calendar month), each
    spanning the whole calendar month; months with more than
    ``max_missing`` of their bins missing are dropped."""
    if len(rec) == 0:
        return []
    mon = rec.times.astype("datetime64[M]")
    keys, first = np.unique(mon, return_index=True)
    bounds = list(first) + [len(rec)]
    out = []
    for k, key in enumerate(keys):
        y, m = int(str(key)[:4]), int(str(key)[5:7])
        if month is not None and m != month:
            continue
        start = key.astype("datetime64[m]")
        stop = (key + 1).astype("datetime64[m]")
        n = int((stop - start) // _STEP)
        sl = slice(bounds[k], bounds[k + 1])
        idx = ((rec.times[sl] - start) // _STEP).astype(np.int64)
        depth = np.full(n, np.nan)
        depth[idx] = rec.depth[sl]
        block = MonthBlock(y, m, depth)
        if block.missing_fraction <= max_missing:
            out.append(block)
    return out


def coarsen(depth: np.ndarray, h: float) -> np.ndarray:
    """Sum 5-minute bins into bins of ``h`` hours; a coarse bin with any
    missing constituent is missing."""
    f = h * BINS_PER_HOUR
    fi = int(round(f))
    if fi < 1 or abs(f - fi) > 1e-9:
        raise NonDividingBin(f"h={h} is not a multiple of 5 minutes")
    n = depth.size // fi
    if n * fi != depth.size:
        raise NonDividingBin(f"h={h} does not divide a block of {depth.size} bins")
    return depth.reshape(n, fi).sum(axis=1)


@dataclass(frozen=True)
class PowerSums:
    """Additive raw sums of a binned series from which the pooled mean,
    variance, lag-1 autocovariance and third central moment follow.

    Arrays have one entry per timescale (or any leading shape); sums over
    observation-months combine by ``+``. Lag pairs never span two blocks or
    a missing bin.
    """

    n: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    n_pair: np.ndarray
    s_lag: np.ndarray  # sum of y_i y_(i+1)
    s_head: np.ndarray  # sum of y_i over pairs
    s_tail: np.ndarray  # sum of y_(i+1) over pairs

    @classmethod
    def of(cls, y: np.ndarray) -> "PowerSums":
        """Sums over the last axis of ``y`` (NaN = missing)."""
        y = np.asarray(y, dtype=float)
        ok = ~np.isnan(y)
        v = np.where(ok, y, 0.0)
        pair = ok[..., 1:] & ok[..., :-1]
        head = np.where(pair, v[..., :-1], 0.0)
        tail = np.where(pair, v[..., 1:], 0.0)
        return cls(ok.sum(-1).astype(float), v.sum(-1), (v * v).sum(-1), (v**3).sum(-1),
                   pair.sum(-1).astype(float), (head * tail).sum(-1), head.sum(-1), tail.sum(-1))

    def _fields(self):
        return (self.n, self.s1, self.s2, self.s3, self.n_pair, self.s_lag, self.s_head, self.s_tail)

    def __add__(self, other: "PowerSums") -> "PowerSums":
        return PowerSums(*(a + b for a, b in zip(self._fields(), other._fields())))

    def __sub__(self, other: "PowerSums") -> "PowerSums":
        return PowerSums(*(a - b for a, b in zip(self._fields(), other._fields())))

    def sum(self, axis=0) -> "PowerSums":
        return PowerSums(*(np.sum(a, axis=axis) for a in self._fields()))

    def take(self, idx) -> "PowerSums":
        return PowerSums(*(a[idx] for a in self._fields()))

    def moments(self):
        """(mean, variance, lag-1 autocovariance, third central moment),
        population denominators."""
        with np.errstate(invalid="ignore", divide="ignore"):
            m = self.s1 / self.n
            e2 = self.s2 / self.n
            var = e2 - m * m
            k3 = self.s3 / self.n - 3 * m * e2 + 2 * m**3
            cov = (self.s_lag - m * (self.s_head + self.s_tail)) / self.n_pair + m * m
        return m, var, cov, k3


def properties_from_sums(ps: PowerSums, timescales) -> np.ndarray:
    """Fitting-property vector from power sums with the timescale on the
    last axis; NaN where a variance is zero."""
    m, var, cov, k3 = ps.moments()
    ts = list(timescales)
    ref = ts.index(1.0) if 1.0 in ts else 0
    out = np.empty(m.shape[:-1] + (1 + 3 * len(ts),))
    out[..., 0] = m[..., ref] / ts[ref]
    # zero variance only up to rounding of the raw sums
    e2 = ps.s2 / np.maximum(ps.n, 1)
    pos = var > 1e-12 * e2
    with np.errstate(invalid="ignore", divide="ignore"):
        sd = np.sqrt(np.where(pos, var, np.nan))
        out[..., 1::3] = sd / m
        out[..., 2::3] = cov / sd**2
        out[..., 3::3] = k3 / sd**3
    return out


def block_sums(blocks: Sequence["MonthBlock"], timescales) -> PowerSums:
    """Power sums per block (leading axis) and timescale (last axis)."""
    per = []
    for b in blocks:
        per.append([PowerSums.of(coarsen(b.depth, h)) for h in timescales])
    fields = [np.array([[getattr(p, f) for p in row] for row in per]) for f in
              ("n", "s1", "s2", "s3", "n_pair", "s_lag", "s_head", "s_tail")]
    return PowerSums(*fields)


@dataclass(frozen=True)
class StatisticVector:
    """Observed fitting properties T for one calendar month, with weights
    1/Var(T) and the per-year values they were computed from."""

    month: int | None
    timescales: tuple[float, ...]
    values: np.ndarray
    variances: np.ndarray
    years: tuple[int, ...]
    per_year: np.ndarray | None = None  # (n_years, n_props), NaN where undefined
    pooled: bool = False
    names: tuple[str, ...] = field(default=())
    cov: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "timescales", tuple(float(h) for h in self.timescales))
        if not self.names:
            object.__setattr__(self, "names", property_names(self.timescales))
        v = np.asarray(self.values, float)
        var = np.asarray(self.variances, float)
        if v.shape != var.shape or v.size != len(self.names):
            raise ValueError("values, variances and names must have equal length")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "variances", var)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.variances

    def covariance(self) -> np.ndarray:
        """Full covariance of T when estimated, else ``diag(variances)``."""
        return np.diag(self.variances) if self.cov is None else self.cov

    def to_dict(self) -> dict:
        return {
            "month": self.month,
            "timescales": list(self.timescales),
            "pooled": self.pooled,
            "years": list(self.years),
            "statistics": [
                {"name": n, "value": float(v), "variance": float(s), "weight": float(1.0 / s)}
                for n, v, s in zip(self.names, self.values, self.variances)
            ],
            "covariance": None if self.cov is None else self.cov.tolist(),
        }

    @classmethod
    def from_dict(cls, doc) -> "StatisticVector":
        stats = doc["statistics"]
        return cls(
            doc.get("month"), tuple(doc["timescales"]),
            np.array([s["value"] for s in stats]), np.array([s["variance"] for s in stats]),
            tuple(doc.get("years", ())), None, bool(doc.get("pooled", False)),
            tuple(s["name"] for s in stats),
            None if doc.get("covariance") is None else np.array(doc["covariance"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StatisticVector":
        return cls.from_dict(json.loads(text))


def _pairwise_cov(x: np.ndarray) -> np.ndarray:
    """Covariance of column means from rows with NaN gaps (pairwise complete)."""
    k = x.shape[1]
    cov = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ok = ~np.isnan(x[:, i]) & ~np.isnan(x[:, j])
            n = ok.sum()
            c = np.cov(x[ok, i], x[ok, j])[0, 1] / n if n > 1 else np.nan
            cov[i, j] = cov[j, i] = c
    return cov


def monthly_statistics(rec: GaugeRecord, month: int,
                       timescales: Sequence[float] = DEFAULT_TIMESCALES,
                       pooled: bool = False, max_missing: float = MAX_MISSING) -> StatisticVector:
    """Fitting properties for one calendar month.

    By default each property is computed per observation year and averaged
    across years; Var(T) is the sample variance of the per-year values over
    the number of years, and years in which a property is undefined (zero
    variance) are left out of it. With ``pooled=True`` each property is
    computed once from the moments of all years together and Var(T) is the
    delete-one-year jackknife variance, which reduces to the former rule for
    a plain average.
    """
    blocks = month_blocks(rec, month, max_missing)
    if len(blocks) < 2:
        raise InsufficientYears(f"month {month}: {len(blocks)} usable year(s), need 2")
    ts = tuple(float(h) for h in timescales)
    sums = block_sums(blocks, ts)
    per_year = properties_from_sums(sums, ts)
    names = property_names(ts)
    n = np.sum(~np.isnan(per_year), axis=0)
    for j, name in enumerate(names):
        if n[j] == 0:
            raise AllDryMonth(f"month {month}: {name} undefined in every year (zero variance)")
        if n[j] < 2 and not pooled:
            raise InsufficientYears(f"month {month}: {name} defined in only {n[j]} year")
    if pooled:
        total = sums.sum(axis=0)
        values = properties_from_sums(total, ts)
        if np.isnan(values).any():
            raise AllDryMonth(f"month {month}: zero variance over all years")
        ny = len(blocks)
        reps = np.array([properties_from_sums(total - sums.take(i), ts) for i in range(ny)])
        if np.isnan(reps).any():
            raise ZeroVariance(f"month {month}: a property is undefined once a single year is removed")
        dev = reps - reps.mean(axis=0)
        cov = (ny - 1) / ny * dev.T @ dev
    else:
        values = np.nanmean(per_year, axis=0)
        cov = _pairwise_cov(per_year)
    variances = np.diag(cov).copy()
    zero = np.nonzero(~(variances > 0))[0]
    if zero.size:
        raise ZeroVariance(f"month {month}: {names[zero[0]]} has zero across-year variance")
    return StatisticVector(month, ts, values, variances, tuple(b.year for b in blocks), per_year,
                           pooled, names, cov)


def jackknife(sums: PowerSums, stat, groups: int | None = None):
    """Grouped delete-a-group jackknife of ``stat(pooled sums)`` over the
    leading (year) axis. Returns (estimate, standard error)."""
    n = sums.n.shape[0]
    groups = n if groups is None else min(groups, n)
    labels = np.arange(n) * groups // n
    total = sums.sum(axis=0)
    est = np.asarray(stat(total))
    reps = np.array([stat(total - sums.take(labels == g).sum(axis=0)) for g in range(groups)])
    se = np.sqrt((groups - 1) / groups * np.sum((reps - reps.mean(axis=0)) ** 2, axis=0))
    return est, se


@dataclass(frozen=True)
class TransitionCounts:
    n_bins: int
    n_dry: int
    wet_wet: int
    wet_dry: int
    dry_dry: int
    dry_wet: int

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        return TransitionCounts(*(a + b for a, b in zip(self._t(), other._t())))

    def _t(self):
        return (self.n_bins, self.n_dry, self.wet_wet, self.wet_dry, self.dry_dry, self.dry_wet)


def transition_counts(bins: np.ndarray, threshold: float = 0.0) -> TransitionCounts:
    """Dry/wet counts for one contiguous run of bins; missing bins (NaN) are
    skipped and pairs touching them dropped."""
    bins = np.asarray(bins, dtype=float)
    ok = ~np.isnan(bins)
    wet = bins > threshold
    dry = ok & ~wet
    a_ok = ok[:-1] & ok[1:]
    w0, w1 = wet[:-1] & a_ok, wet[1:]
    d0, d1 = dry[:-1] & a_ok, dry[1:]
    return TransitionCounts(
        int(ok.sum()), int(dry.sum()),
        int(np.sum(w0 & w1)), int(np.sum(w0 & d1)),
        int(np.sum(d0 & d1)), int(np.sum(d0 & ~d1 & ok[1:])),
    )


@dataclass(frozen=True)
class WetDryStats:
    h: float
    threshold: float
    counts: TransitionCounts

    @property
    def p_dry(self) -> float:
        if self.counts.n_bins == 0:
            raise NoWetIntervals("no observed intervals")
        return self.counts.n_dry / self.counts.n_bins

    @property
    def p_ww(self) -> float:
        n = self.counts.wet_wet + self.counts.wet_dry
        if n == 0:
            raise NoWetIntervals("no wet interval with an observed successor")
        return self.counts.wet_wet / n

    @property
    def p_dw(self) -> float:
        """P(dry at i+1 | wet at i)."""
        n = self.counts.wet_wet + self.counts.wet_dry
        if n == 0:
            raise NoWetIntervals("no wet interval with an observed successor")
        return self.counts.wet_dry / n

    @property
    def p_dd(self) -> float:
        n = self.counts.dry_dry + self.counts.dry_wet
        if n == 0:
            raise NoWetIntervals("no dry interval with an observed successor")
        return self.counts.dry_dry / n

    def as_dict(self) -> dict:
        out = {}
        for k in ("p_dry", "p_ww", "p_dd"):
            try:
                out[k] = getattr(self, k)
            except NoWetIntervals:
                out[k] = None
        return out


def wet_dry_from_blocks(blocks: Iterable[np.ndarray], h: float, threshold: float = 0.0) -> WetDryStats:
    total = TransitionCounts(0, 0, 0, 0, 0, 0)
    for b in blocks:
        total = total + transition_counts(b, threshold)
    return WetDryStats(h, threshold, total)


def wet_dry_stats(rec: GaugeRecord, month: int | None, h: float, threshold: float = 0.0,
                  max_missing: float = MAX_MISSING) -> WetDryStats:
    """Proportion dry and wet/dry transition probabilities of ``h``-hour
    totals; transitions are counted within calendar months only."""
    blocks = month_blocks(rec, month, max_missing)
    return wet_dry_from_blocks((coarsen(b.depth, h) for b in blocks), h, threshold)


def reduced_variate(p):
    """Gumbel reduced variate -ln(-ln p) for non-exceedance probability p."""
    return -np.log(-np.log(p))


def gringorten(n: int) -> np.ndarray:
    """Non-exceedance plotting positions of the ascending order statistics."""
    i = np.arange(1, n + 1)
    return (i - 0.44) / (n + 0.12)


@dataclass(frozen=True)
class AnnualMaxima:
    h: float
    years: tuple[int, ...]
    maxima: np.ndarray  # in year order

    @property
    def ranked(self) -> np.ndarray:
        return np.sort(self.maxima)

    @property
    def plotting_position(self) -> np.ndarray:
        return gringorten(self.maxima.size)

    @property
    def return_period(self) -> np.ndarray:
        return 1.0 / (1.0 - self.plotting_position)

    @property
    def reduced_variate(self) -> np.ndarray:
        return reduced_variate(self.plotting_position)


def annual_maxima(rec: GaugeRecord, h: float, month: int | None = None,
                  max_missing: float = MAX_MISSING) -> AnnualMaxima:
    """Largest ``h``-hour total (fixed bins from midnight) per calendar year,
    or per year within one calendar month. A year counts when all its months
    are present and none is more than ``max_missing`` missing."""
    blocks = month_blocks(rec, month, max_missing)
    by_year: dict[int, list[MonthBlock]] = {}
    for b in blocks:
        by_year.setdefault(b.year, []).append(b)
    need = 1 if month is not None else 12
    years, maxima = [], []
    for y in sorted(by_year):
        bs = by_year[y]
        if len(bs) < need:
            continue
        best = max(float(np.nanmax(coarsen(b.depth, h), initial=0.0)) for b in bs)
        years.append(y)
        maxima.append(best)
    if not years:
        raise NoCompleteYears("no complete year in record")
    return AnnualMaxima(h, tuple(years), np.array(maxima))
