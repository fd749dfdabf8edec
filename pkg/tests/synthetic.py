"""Synthetic gauge statistics for the inverse-problem tests."""

import numpy as np

from blrain.simulate import simulate_periods
from blrain.stats import GaugeRecord, monthly_statistics

JANUARY_HOURS = 744.0


def january_record(p, n_years, seed, dep="independent"):
    """``n_years`` consecutive simulated Januaries as a gauge record."""
    y = simulate_periods(p, n_years, JANUARY_HOURS, dep=dep, seed=seed)
    starts = np.array([f"{2000 + i:04d}-01-01T00:00" for i in range(n_years)], dtype="datetime64[m]")
    offsets = np.arange(y.shape[1]) * np.timedelta64(5, "m")
    return GaugeRecord((starts[:, None] + offsets[None, :]).ravel(), y.ravel())


def january_stats(p, n_years, seed, pooled=True, dep="independent"):
    return monthly_statistics(january_record(p, n_years, seed, dep), 1, pooled=pooled)
