"""Command-line front end: ``blrain {stats,fit,simulate,validate,extremes,profile}``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then command-line flags. Every output file carries the resolved
configuration (JSON outputs in a ``config`` field, CSV outputs in a leading
``#`` comment line) so a run can be reproduced from its outputs alone.
Outputs contain no timestamps or host details: the same inputs and seed
give byte-identical files, whatever ``--jobs`` is.

Exit codes: 0 success, 1 some months failed, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import BLRainError, DataError, ParameterError
from .fitting import (
    DEFAULT_FIXED,
    FITTABLE,
    FitOptions,
    ObjectiveSpec,
    ParameterCovariance,
    confidence_interval,
    default_start,
    fit,
    parameter_covariance,
    profile,
    profile_grid,
)
from .moments import DEFAULT_TIMESCALES, model_properties, property_names, timescale_label
from .params import (
    ConstraintSet,
    IntensityLaw,
    ModelParams,
    PulseDepthDependence,
    Variant,
)
from .simulate import RejectionLimits, simulate_calendar
from .stats import (
    GaugeRecord,
    StatisticVector,
    annual_maxima,
    format_depth,
    gringorten,
    load_series,
    monthly_statistics,
    reduced_variate,
    wet_dry_stats,
    write_series,
)

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2

DEFAULTS = {
    "data": None,
    "params": None,
    "stats": None,
    "model": "BLRPR_X",
    "intensity": {"family": "exponential", "shape": None},
    "pulse_depths": None,  # common for BLIPR, independent otherwise
    "alpha_min": 1.0,
    "fixed": None,  # per-model default (mu_x = 0.001 for BLIPR)
    "timescales": list(DEFAULT_TIMESCALES),
    "months": list(range(1, 13)),
    "seed": 0,
    "replicates": 1,
    "years": 1,
    "start_year": 2001,
    "pooled": False,
    "threshold": 0.0,
    "uncertainty": False,
    "extremes_h": 1.0,
    "limits": None,
    "fit": {"n_starts": 20, "sigma": 0.4, "n_refine": 5},
    "profile": {"half_width": 0.5, "points": 21},
    "jobs": 1,
    "out": "out",
}


class InputError(Exception):
    """Bad configuration or unreadable input (exit code 2)."""


# configuration -------------------------------------------------------------

def parse_months(text: str) -> list[int]:
    months = set()
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            months.update(range(int(a), int(b) + 1))
        else:
            months.add(int(part))
    if not months or not all(1 <= m <= 12 for m in months):
        raise InputError(f"months must lie in 1..12, got {text!r}")
    return sorted(months)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"{path}: config file not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(user)
    flags = {
        "data": args.data, "params": args.params, "stats": args.stats, "model": args.model,
        "alpha_min": args.alpha_min, "seed": args.seed, "replicates": args.replicates,
        "years": args.years, "jobs": args.jobs, "out": args.out,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.months is not None:
        cfg["months"] = parse_months(args.months)
    if args.uncertainty:
        cfg["uncertainty"] = True
    if args.pooled:
        cfg["pooled"] = True
    cfg["months"] = sorted(int(m) for m in cfg["months"])
    cfg["command"] = args.command
    for key in ("data", "params", "stats", "out"):
        if cfg[key] is not None:
            cfg[key] = str(cfg[key])
    return cfg


def _models(cfg) -> list[Variant]:
    try:
        return [Variant(m.strip()) for m in str(cfg["model"]).split(",")]
    except ValueError:
        raise InputError(f"unknown model {cfg['model']!r}") from None


def _law(cfg) -> IntensityLaw:
    try:
        return IntensityLaw.from_dict(cfg["intensity"] or {})
    except (ValueError, BLRainError) as exc:
        raise InputError(f"intensity: {exc}") from None


def _dep(cfg, variant: Variant) -> PulseDepthDependence:
    if cfg["pulse_depths"] is not None:
        return PulseDepthDependence(cfg["pulse_depths"])
    return PulseDepthDependence.COMMON if variant is Variant.BLIPR else PulseDepthDependence.INDEPENDENT


def _constraints(cfg, variant: Variant) -> ConstraintSet:
    fixed = DEFAULT_FIXED.get(variant, {}) if cfg["fixed"] is None else cfg["fixed"]
    return ConstraintSet(alpha_min=float(cfg["alpha_min"]), fixed=dict(fixed))


def _limits(cfg) -> RejectionLimits | None:
    return RejectionLimits(**cfg["limits"]) if cfg["limits"] else None


def _recorded(cfg) -> dict:
    # worker count and output location cannot change results
    return {k: v for k, v in cfg.items() if k not in ("jobs", "out")}


def _provenance(cfg) -> str:
    return "config=" + json.dumps(_recorded(cfg), sort_keys=True, separators=(",", ":"))


# file helpers --------------------------------------------------------------

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict, cfg: dict):
    _atomic_write(path, json.dumps({"config": _recorded(cfg), **doc}, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows, cfg: dict):
    lines = ["# " + _provenance(cfg), ",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(x) for x in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return format_depth(float(x))
    return str(x)


def _load_record(cfg) -> GaugeRecord:
    if cfg["data"] is None:
        raise InputError("no data file given (--data or config 'data')")
    path = Path(cfg["data"])
    if not path.is_file():
        raise InputError(f"{path}: data file not found")
    return load_series(path)


def _param_docs(path: Path) -> list[dict]:
    if path.is_dir():
        docs = []
        for p in sorted(path.glob("*.json")):
            docs.extend(_param_docs(p))
        return docs
    doc = json.loads(path.read_text())
    if isinstance(doc, list):
        return doc
    if "months" in doc and isinstance(doc["months"], dict):
        return [{**d, "variant": doc.get("variant", d.get("variant")), "month": int(m)}
                for m, d in doc["months"].items()]
    return [doc] if "params" in doc and "variant" in doc else []


def load_params(cfg) -> dict[int, tuple[ModelParams, ParameterCovariance | None]]:
    """Parameter sets by month from a file or directory of parameter / fit
    documents. A document without a month applies to every configured month."""
    if cfg["params"] is None:
        raise InputError("no parameter file given (--params or config 'params')")
    path = Path(cfg["params"])
    if not path.exists():
        raise InputError(f"{path}: parameter file not found")
    try:
        docs = _param_docs(path)
        out = {}
        for doc in docs:
            p = ModelParams.from_dict(doc)
            cov = None
            if doc.get("log_covariance"):
                c = doc["log_covariance"]
                cov = ParameterCovariance(
                    p.variant, tuple(c["names"]), np.array(c["mean"]), np.array(c["cov"]),
                    {n: p[n] for n in p.names if n not in c["names"]}, float(doc.get("alpha_min", 0.0)),
                )
            months = [p.month] if p.month is not None else cfg["months"]
            for m in months:
                out[int(m)] = (replace(p, month=int(m)), cov)
    except (json.JSONDecodeError, KeyError, TypeError, ParameterError) as exc:
        raise InputError(f"{path}: invalid parameter document ({exc})") from None
    if not out:
        raise InputError(f"{path}: no parameter sets found")
    return {m: out[m] for m in sorted(out) if m in cfg["months"]}


def _load_stats(cfg) -> dict[int, StatisticVector]:
    path = Path(cfg["stats"])
    if not path.exists():
        raise InputError(f"{path}: statistics not found")
    files = sorted(path.glob("stats_*.json")) if path.is_dir() else [path]
    out = {}
    for f in files:
        try:
            sv = StatisticVector.from_dict(json.loads(f.read_text())["statistics"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{f}: invalid statistics document ({exc})") from None
        if sv.month in cfg["months"]:
            out[sv.month] = sv
    return out


def _map(cfg, fn, items):
    """Ordered map, in worker processes when ``jobs > 1``."""
    items = list(items)
    if int(cfg["jobs"]) > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _replicate_params(base, cov, cfg, replicate: int, month: int) -> ModelParams:
    if cfg["uncertainty"]:
        if cov is None:
            raise InputError(f"month {month}: --uncertainty needs a fit document with a covariance")
        seed = int(np.random.SeedSequence([int(cfg["seed"]), replicate, month, 7]).generate_state(1)[0])
        return replace(cov.sample(1, seed)[0], month=month)
    return base


# commands -----------------------------------------------------------------

def _stats_one(job):
    rec, month, cfg = job
    try:
        return month, monthly_statistics(rec, month, cfg["timescales"], cfg["pooled"]), None
    except BLRainError as exc:
        return month, None, str(exc)


def cmd_stats(cfg) -> int:
    rec = _load_record(cfg)
    out = Path(cfg["out"])
    results = _map(cfg, _stats_one, [(rec, m, cfg) for m in cfg["months"]])
    rows, months, failed = [], [], 0
    for month, sv, err in results:
        if sv is None:
            failed += 1
            months.append((month, "failed", 0, err))
            continue
        _write_json(out / f"stats_{month:02d}.json", {"statistics": sv.to_dict()}, cfg)
        months.append((month, "ok", len(sv.years), ""))
        for n, v, s in zip(sv.names, sv.values, sv.variances):
            rows.append((month, n, float(v), float(s), float(1.0 / s)))
    _write_csv(out / "statistics.csv", ["month", "property", "value", "variance", "weight"], rows, cfg)
    _write_csv(out / "months.csv", ["month", "status", "years", "error"], months, cfg)
    return EXIT_PARTIAL if failed else EXIT_OK


def _fit_one(job):
    variant, month, sv, cfg = job
    try:
        spec = ObjectiveSpec(variant, sv, _constraints(cfg, variant), _law(cfg), _dep(cfg, variant))
        opts = FitOptions(seed=int(cfg["seed"]), **cfg["fit"])
        start = default_start(variant, spec.constraints.alpha_min)
        start = replace(start.replace(**spec.constraints.fixed), month=month)
        res = fit(spec, start, opts)
        try:
            # the across-year covariance is rank deficient with few years
            sigma = sv.covariance() if len(sv.years) > len(sv.values) else None
            res = replace(res, covariance=parameter_covariance(spec, res, sigma))
        except (BLRainError, np.linalg.LinAlgError):
            pass
        return variant, month, res, None
    except BLRainError as exc:
        return variant, month, None, str(exc)


def cmd_fit(cfg) -> int:
    models = _models(cfg)
    for v in models:
        if v not in FITTABLE:
            raise InputError(f"{v.value} cannot be fitted (no analytic moments)")
    if cfg["stats"] is not None:
        stats = _load_stats(cfg)
    else:
        rec = _load_record(cfg)
        stats = {}
        for month, sv, err in (_stats_one((rec, m, cfg)) for m in cfg["months"]):
            if sv is not None:
                stats[month] = sv
    out = Path(cfg["out"])
    jobs = [(v, m, stats[m], cfg) for v in models for m in cfg["months"] if m in stats]
    results = {(v, m): (res, err) for v, m, res, err in _map(cfg, _fit_one, jobs)}
    failed = 0
    table = []
    for m in cfg["months"]:
        row = [m]
        for v in models:
            res, err = results.get((v, m), (None, "no statistics for month"))
            if res is None:
                failed += 1
                row.append("failed")
                continue
            doc = res.to_dict()
            doc["alpha_min"] = float(cfg["alpha_min"])
            _write_json(out / f"fit_{v.value}_{m:02d}.json", doc, cfg)
            row.append(float(res.value))
        table.append(row)
    header = ["month"] + [f"S_{v.value}" for v in models]
    _write_csv(out / "summary.csv", header, table, cfg)
    _atomic_write(out / "summary.txt", _format_table(header, table))
    return EXIT_PARTIAL if failed else EXIT_OK


def _format_table(header, rows) -> str:
    names = ["", "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"]
    lines = ["Minimum objective function values", "Month  " + "  ".join(f"{h[2:]:>10s}" for h in header[1:])]
    for row in rows:
        cells = [f"{c:10.3f}" if isinstance(c, float) else f"{c:>10s}" for c in row[1:]]
        lines.append(f"{names[row[0]]:5s}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def _sim_one(job):
    r, params, cfg = job
    law = _law(cfg)
    chosen = {m: _replicate_params(p, cov, cfg, r, m) for m, (p, cov) in params.items()}
    dep = _dep(cfg, next(iter(chosen.values())).variant)
    years = range(int(cfg["start_year"]), int(cfg["start_year"]) + int(cfg["years"]))
    series = simulate_calendar(chosen, years, law, dep, int(cfg["seed"]), r, limits=_limits(cfg))
    return r, chosen, GaugeRecord.from_series(series)


def cmd_simulate(cfg) -> int:
    params = load_params(cfg)
    out = Path(cfg["out"])
    for r, chosen, rec in _map(cfg, _sim_one, [(r, params, cfg) for r in range(int(cfg["replicates"]))]):
        path = out / f"sim_{r:03d}.csv"
        out.mkdir(parents=True, exist_ok=True)
        write_series(path.with_suffix(".tmp"), rec, comment=_provenance({**cfg, "replicate": r}))
        os.replace(path.with_suffix(".tmp"), path)
        if cfg["uncertainty"]:
            docs = {str(m): p.to_dict() for m, p in chosen.items()}
            _write_json(out / f"sim_{r:03d}_params.json", {"replicate": r, "months": docs}, cfg)
    return EXIT_OK


def _record_years(rec: GaugeRecord, month: int) -> list[int]:
    from .stats import month_blocks

    return [b.year for b in month_blocks(rec, month)]


def _validate_one(job):
    month, p, cov, rec, cfg = job
    rows = []
    try:
        years = _record_years(rec, month)
        if not years:
            raise DataError(f"month {month}: no usable observation years")
        law, dep = _law(cfg), _dep(cfg, p.variant)
        sims = []
        for r in range(int(cfg["replicates"])):
            q = _replicate_params(p, cov, cfg, r, month)
            sims.append(GaugeRecord.from_series(
                simulate_calendar({month: q}, years, law, dep, int(cfg["seed"]), r, limits=_limits(cfg))))
        thr = float(cfg["threshold"])
        for h in cfg["timescales"]:
            obs = wet_dry_stats(rec, month, h, thr).as_dict()
            mod = [wet_dry_stats(s, month, h, thr).as_dict() for s in sims]
            for k in ("p_dry", "p_ww", "p_dd"):
                vals = np.array([d[k] for d in mod if d[k] is not None], dtype=float)
                rows.append(_report_row(month, k, h, obs[k], vals))
        try:
            observed = monthly_statistics(rec, month, cfg["timescales"], cfg["pooled"])
            obs_vals = observed.values
        except BLRainError:
            obs_vals = np.full(1 + 3 * len(cfg["timescales"]), np.nan)
        names = property_names(cfg["timescales"])
        if p.variant in FITTABLE:
            model = model_properties(p, law, dep, cfg["timescales"])
            for n, o, v in zip(names, obs_vals, model):
                rows.append((month, n, "", _nan_none(o), float(v), None, None))
        else:
            per = np.array([_safe_props(s, month, cfg) for s in sims])
            for j, n in enumerate(names):
                rows.append(_report_row(month, n, "", _nan_none(obs_vals[j]), per[:, j][~np.isnan(per[:, j])]))
        return month, rows, None
    except BLRainError as exc:
        return month, rows, str(exc)


def _safe_props(rec, month, cfg):
    try:
        return monthly_statistics(rec, month, cfg["timescales"], cfg["pooled"]).values
    except BLRainError:
        return np.full(1 + 3 * len(cfg["timescales"]), np.nan)


def _nan_none(x):
    return None if x is None or np.isnan(x) else float(x)


def _report_row(month, name, h, observed, model_vals):
    label = timescale_label(h) if h != "" else ""
    if model_vals.size == 0:
        return (month, name, label, observed, None, None, None)
    mean = float(model_vals.mean())
    sd = float(model_vals.std(ddof=1)) if model_vals.size > 1 else None
    z = (observed - mean) / sd if (observed is not None and sd) else None
    return (month, name, label, observed, mean, sd, z)


def cmd_validate(cfg) -> int:
    rec = _load_record(cfg)
    params = load_params(cfg)
    results = _map(cfg, _validate_one, [(m, p, cov, rec, cfg) for m, (p, cov) in params.items()])
    rows, failed = [], 0
    for month, r, err in results:
        rows.extend(r)
        if err is not None:
            failed += 1
            rows.append((month, "error", "", None, None, None, err))
    header = ["month", "property", "h", "observed", "model", "model_sd", "z"]
    _write_csv(Path(cfg["out"]) / "validation.csv", header, rows, cfg)
    return EXIT_PARTIAL if failed else EXIT_OK


def _extremes_one(job):
    r, params, month, years, cfg = job
    chosen = {m: _replicate_params(p, cov, cfg, r, m) for m, (p, cov) in params.items()}
    dep = _dep(cfg, next(iter(chosen.values())).variant)
    series = simulate_calendar(chosen, years, _law(cfg), dep, int(cfg["seed"]), r, limits=_limits(cfg))
    return annual_maxima(GaugeRecord.from_series(series), float(cfg["extremes_h"]), month).ranked


def cmd_extremes(cfg) -> int:
    rec = _load_record(cfg)
    params = load_params(cfg)
    h = float(cfg["extremes_h"])
    month = cfg["months"][0] if len(cfg["months"]) == 1 else None
    if month is None and sorted(params) != list(range(1, 13)):
        raise InputError("annual maxima need parameters for all 12 months (or select one month)")
    observed = annual_maxima(rec, h, month)
    years = list(observed.years)
    jobs = [(r, params, month, years, cfg) for r in range(int(cfg["replicates"]))]
    sims = np.array(_map(cfg, _extremes_one, jobs))
    q = np.quantile(sims, [0.025, 0.5, 0.975], axis=0)
    pp = gringorten(len(years))
    rows = []
    for i in range(len(years)):
        rows.append((i + 1, float(pp[i]), float(1 / (1 - pp[i])), float(reduced_variate(pp[i])),
                     float(observed.ranked[i]), float(q[0, i]), float(q[1, i]), float(q[2, i])))
    header = ["rank", "plotting_position", "return_period", "reduced_variate",
              "observed", "sim_q025", "sim_median", "sim_q975"]
    _write_csv(Path(cfg["out"]) / "extremes.csv", header, rows, cfg)
    return EXIT_OK


def _profile_one(job):
    month, p, sv, cfg = job
    try:
        spec = ObjectiveSpec(p.variant, sv, _constraints(cfg, p.variant), _law(cfg), _dep(cfg, p.variant))
        opts = FitOptions(seed=int(cfg["seed"]), **cfg["fit"])
        res = fit(spec, p, replace(opts, n_starts=1))
        rows, cis = [], {}
        for name in spec.free_names:
            grid = profile_grid(res, name, cfg["profile"]["half_width"], cfg["profile"]["points"],
                                spec.constraints.alpha_min)
            curve = profile(spec, res, name, grid, opts)
            rows.extend(curve.to_rows())
            try:
                cis[name] = confidence_interval(curve).to_dict()
            except BLRainError as exc:
                cis[name] = {"error": str(exc)}
        return month, res, rows, cis, None
    except BLRainError as exc:
        return month, None, [], {}, str(exc)


def cmd_profile(cfg) -> int:
    params = load_params(cfg)
    if cfg["stats"] is not None:
        stats = _load_stats(cfg)
    else:
        rec = _load_record(cfg)
        stats = {m: sv for m, sv, _ in (_stats_one((rec, m, cfg)) for m in params) if sv is not None}
    jobs = [(m, p, stats[m], cfg) for m, (p, _) in params.items() if m in stats]
    failed = len(params) - len(jobs)
    out = Path(cfg["out"])
    for month, res, rows, cis, err in _map(cfg, _profile_one, jobs):
        if res is None:
            failed += 1
            continue
        _write_csv(out / f"profile_{month:02d}.csv", ["param", "value", "objective"], rows, cfg)
        _write_json(out / f"ci_{month:02d}.json",
                    {"month": month, "objective": res.value, "params": dict(res.params.values),
                     "confidence_intervals": cis}, cfg)
    return EXIT_PARTIAL if failed else EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
    "extremes": cmd_extremes,
    "profile": cmd_profile,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--data", help="gauge CSV (timestamp,depth_mm)")
    common.add_argument("--params", help="parameter or fit document, or a directory of them")
    common.add_argument("--stats", help="statistics document or directory from 'stats'")
    common.add_argument("--model", help="BLRPR_X, BLIPR, ... (comma list for 'fit')")
    common.add_argument("--months", help="e.g. 1-12 or 1,7")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha-min", dest="alpha_min", type=float)
    common.add_argument("--uncertainty", action="store_true",
                        help="draw parameters per replicate from the fitted covariance")
    common.add_argument("--replicates", type=int)
    common.add_argument("--years", type=int, help="years per simulated replicate")
    common.add_argument("--pooled", action="store_true", help="pool moments across years")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--out", help="output directory")
    parser = argparse.ArgumentParser(prog="blrain", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "stats": "monthly fitting statistics of a gauge record",
        "fit": "fit models month by month",
        "simulate": "simulate 5-minute series",
        "validate": "compare wet/dry statistics and moments with a model",
        "extremes": "annual maxima with a simulated envelope",
        "profile": "profile objective functions and confidence intervals",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (InputError, DataError, OSError) as exc:
        print(f"blrain {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ParameterError as exc:
        print(f"blrain {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
