import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from blrain.cli import main, parse_months
from blrain.simulate import simulate_calendar
from blrain.stats import GaugeRecord, annual_maxima, write_series
from conftest import month_params
from reference_rows import params
from synthetic import january_stats

FAST_FIT = {"n_starts": 3, "sigma": 0.4, "n_refine": 3}


def read_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert lines[0].startswith("# config=")
    return list(csv.DictReader(lines[1:]))


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def jan_stats_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("stats")
    sv = january_stats(params("BLRPR_X", "Jan"), 500, seed=7)
    write_json(d / "stats_01.json", {"statistics": sv.to_dict()})
    return d / "stats_01.json"


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    return write_json(tmp_path_factory.mktemp("cfg") / "run.json", {"fit": FAST_FIT})


@pytest.fixture(scope="module")
def jan_fit(tmp_path_factory, jan_stats_file, config_file):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--stats", str(jan_stats_file), "--months", "1", "--config", str(config_file),
                 "--out", str(out)])
    assert code == 0
    return out / "fit_BLRPR_X_01.json"


def test_parse_months():
    assert parse_months("1-3,7") == [1, 2, 3, 7]
    assert parse_months("12,1") == [1, 12]


def test_stats_fixture_gives_twelve_months(gauge_csv, tmp_path):
    assert main(["stats", "--data", str(gauge_csv), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "months.csv")
    assert [int(r["month"]) for r in rows] == list(range(1, 13))
    assert all(r["status"] == "ok" and r["years"] == "2" for r in rows)
    assert len(list(tmp_path.glob("stats_*.json"))) == 12
    assert len(read_csv(tmp_path / "statistics.csv")) == 12 * 13
    doc = json.loads((tmp_path / "stats_01.json").read_text())
    assert doc["config"]["seed"] == 0


def test_missing_file_is_input_error(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["stats", "--data", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_malformed_data_is_input_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,depth_mm\n2001-01-01T00:00,0.1\n2001-01-01T00:05,-3\n")
    assert main(["stats", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert f"{bad}:3" in err


def test_unknown_config_key(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"sed": 1})
    assert main(["stats", "--config", str(cfg), "--data", "x"]) == 2


def test_partial_failure_exit_code(tmp_path):
    ps = {1: params("BLRPR_X", "Jan")}
    path = tmp_path / "jan.csv"
    write_series(path, GaugeRecord.from_series(simulate_calendar(ps, [2001, 2002], seed=1)))
    assert main(["stats", "--data", str(path), "--months", "1,2", "--out", str(tmp_path / "o")]) == 1
    rows = read_csv(tmp_path / "o" / "months.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"] == "failed"


def test_fit_recovers_generator(jan_fit):
    doc = json.loads(jan_fit.read_text())
    truth = params("BLRPR_X", "Jan")
    for name, v in doc["params"].items():
        tol = 0.25 if name == "alpha" else 0.15
        assert v == pytest.approx(truth[name], rel=tol), name
    # S is chi-square-like with (13 - 6) degrees of freedom
    assert doc["objective"] < 3 * 7
    assert doc["log_covariance"]["names"] == list(truth.names)
    assert doc["config"]["fit"] == FAST_FIT


def test_fit_comparison_table(tmp_path, jan_stats_file, config_file):
    code = main(["fit", "--stats", str(jan_stats_file), "--months", "1", "--model", "BLIPR,BLRPR_X",
                 "--config", str(config_file), "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "summary.csv")
    assert list(rows[0]) == ["month", "S_BLIPR", "S_BLRPR_X"]
    assert float(rows[0]["S_BLIPR"]) > 0 and float(rows[0]["S_BLRPR_X"]) > 0
    table = (tmp_path / "summary.txt").read_text().splitlines()
    assert table[1].split() == ["Month", "BLIPR", "BLRPR_X"]
    assert table[2].split()[0] == "Jan"
    fit_blipr = json.loads((tmp_path / "fit_BLIPR_01.json").read_text())
    assert fit_blipr["params"]["mu_x"] == 0.001


def test_fit_alpha_min_config(tmp_path, jan_stats_file):
    cfg = write_json(tmp_path / "c.json", {"fit": FAST_FIT, "alpha_min": 2.0})
    assert main(["fit", "--stats", str(jan_stats_file), "--months", "1", "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fit_BLRPR_X_01.json").read_text())
    assert doc["params"]["alpha"] > 2.0
    assert doc["config"]["alpha_min"] == 2.0


def test_fit_missing_month_is_marked(tmp_path, jan_stats_file, config_file):
    code = main(["fit", "--stats", str(jan_stats_file), "--months", "1,2", "--config", str(config_file),
                 "--out", str(tmp_path)])
    assert code == 1
    rows = read_csv(tmp_path / "summary.csv")
    assert rows[1]["S_BLRPR_X"] == "failed"


def test_simulate_reproducible_csv(tmp_path):
    pfile = write_json(tmp_path / "p.json", params("BLRPR_X", "Jul").to_dict())
    for out in ("a", "b"):
        assert main(["simulate", "--params", str(pfile), "--seed", "5", "--out", str(tmp_path / out)]) == 0
    a, b = (tmp_path / "a" / "sim_000.csv").read_bytes(), (tmp_path / "b" / "sim_000.csv").read_bytes()
    assert a == b
    assert main(["simulate", "--params", str(pfile), "--seed", "6", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "sim_000.csv").read_bytes() != a


def test_simulate_zero_rate_all_zero(tmp_path):
    p = params("BLRPR_X", "Jul").replace(**{"lambda": 0.0})
    pfile = write_json(tmp_path / "p.json", p.to_dict())
    assert main(["simulate", "--params", str(pfile), "--months", "7", "--out", str(tmp_path)]) == 0
    d = np.loadtxt(tmp_path / "sim_000.csv", delimiter=",", skiprows=2, usecols=1)
    assert d.size == 31 * 288 and not d.any()


def test_simulate_invalid_params(tmp_path, capsys):
    pfile = write_json(tmp_path / "p.json", {"variant": "BLRPR_X", "params": {"lambda": 1.0}})
    assert main(["simulate", "--params", str(pfile), "--out", str(tmp_path)]) == 2
    assert str(pfile) in capsys.readouterr().err


def test_simulate_with_uncertainty(tmp_path, jan_fit):
    assert main(["simulate", "--params", str(jan_fit), "--months", "1", "--replicates", "3", "--uncertainty",
                 "--out", str(tmp_path)]) == 0
    drawn = [json.loads((tmp_path / f"sim_{r:03d}_params.json").read_text())["months"]["1"]["params"]
             for r in range(3)]
    assert drawn[0] != drawn[1] != drawn[2]
    assert all(d["alpha"] > 1.0 for d in drawn)


def test_uncertainty_needs_covariance(tmp_path):
    pfile = write_json(tmp_path / "p.json", params("BLRPR_X", "Jan").to_dict())
    assert main(["simulate", "--params", str(pfile), "--months", "1", "--uncertainty",
                 "--out", str(tmp_path)]) == 2


@pytest.fixture(scope="module")
def generator_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    ps = {m: month_params("BLRPR_X")[m] for m in (1, 7)}
    rec = GaugeRecord.from_series(simulate_calendar(ps, range(2001, 2011), seed=99, replicate=5))
    write_series(d / "obs.csv", rec)
    write_json(d / "params.json", [p.to_dict() for p in ps.values()])
    return d


def test_validate_schema(generator_files, tmp_path):
    g = generator_files
    assert main(["validate", "--data", str(g / "obs.csv"), "--params", str(g / "params.json"),
                 "--months", "1,7", "--replicates", "10", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "validation.csv")
    wet = [r for r in rows if r["property"] in ("p_dry", "p_ww", "p_dd")]
    assert {(r["month"], r["property"], r["h"]) for r in wet} == {
        (m, k, h) for m in ("1", "7") for k in ("p_dry", "p_ww", "p_dd") for h in ("5min", "1h", "6h", "24h")}
    for r in rows:
        assert r["observed"] != "" and r["model"] != ""
    for r in wet:
        assert float(r["model_sd"]) > 0
    moments = [r for r in rows if r["property"].startswith(("mean", "cv", "ac1", "skew"))]
    assert len(moments) == 2 * 13


@pytest.mark.slow
def test_validate_self_consistent(tmp_path):
    # z-scores of records drawn from the validated model are calibrated:
    # statistics of one record move together, so calibrate across records
    p = month_params("BLRPR_X")[1]
    pfile = write_json(tmp_path / "p.json", p.to_dict())
    z = []
    for k in range(20):
        rec = GaugeRecord.from_series(simulate_calendar({1: p}, range(2001, 2011), seed=99, replicate=k))
        write_series(tmp_path / "obs.csv", rec)
        assert main(["validate", "--data", str(tmp_path / "obs.csv"), "--params", str(pfile), "--months", "1",
                     "--replicates", "20", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "validation.csv")
        z.append([float(r["z"]) for r in rows if r["property"] in ("p_dry", "p_ww")])
    z = np.array(z)
    assert np.all(np.abs(z.mean(axis=0)) < 0.8)
    assert np.all((z.std(axis=0, ddof=1) > 0.6) & (z.std(axis=0, ddof=1) < 1.6))


def test_validate_wrong_params_reports_discrepancy(generator_files, tmp_path):
    g = generator_files
    wrong = [params("BLRPR_X", m).replace(**{"lambda": 0.1}).to_dict() | {"month": i}
             for i, m in ((1, "Jan"), (7, "Jul"))]
    pfile = write_json(tmp_path / "wrong.json", wrong)
    assert main(["validate", "--data", str(g / "obs.csv"), "--params", str(pfile), "--months", "1,7",
                 "--replicates", "10", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "validation.csv")
    z = np.array([float(r["z"]) for r in rows if r["property"] == "p_dry"])
    assert np.max(np.abs(z)) > 5


def fitted_january(jan_fit):
    doc = json.loads(jan_fit.read_text())
    return params("BLRPR_X", "Jan").replace(**doc["params"])


@pytest.fixture(scope="module")
def extremes_run(tmp_path_factory, jan_fit):
    d = tmp_path_factory.mktemp("ext")
    # "observed" record: one more replicate of the fitted model, 15 Januaries
    rec = GaugeRecord.from_series(
        simulate_calendar({1: fitted_january(jan_fit)}, range(2001, 2016), seed=0, replicate=1000))
    write_series(d / "obs.csv", rec)
    code = main(["extremes", "--data", str(d / "obs.csv"), "--params", str(jan_fit), "--months", "1",
                 "--replicates", "100", "--uncertainty", "--out", str(d)])
    assert code == 0
    return read_csv(d / "extremes.csv")


def test_extremes_envelope_ordering(extremes_run):
    med = np.array([float(r["sim_median"]) for r in extremes_run])
    lo = np.array([float(r["sim_q025"]) for r in extremes_run])
    hi = np.array([float(r["sim_q975"]) for r in extremes_run])
    assert len(extremes_run) == 15
    assert np.all(np.diff(med) >= 0)
    assert np.all(lo <= med) and np.all(med <= hi)


def test_extremes_observed_inside_envelope(extremes_run, jan_fit):
    # ranked maxima of one record are correlated, so average coverage over records
    lo = np.array([float(r["sim_q025"]) for r in extremes_run])
    hi = np.array([float(r["sim_q975"]) for r in extremes_run])
    assert float(extremes_run[0]["observed"]) <= float(extremes_run[-1]["observed"])
    p = fitted_january(jan_fit)
    inside = []
    for k in range(20):
        rec = GaugeRecord.from_series(simulate_calendar({1: p}, range(2001, 2016), seed=1, replicate=k))
        obs = annual_maxima(rec, 1.0, 1).ranked
        inside.append((lo <= obs) & (obs <= hi))
    assert np.mean(inside) >= 0.9


def test_extremes_two_year_row(extremes_run):
    row = [r for r in extremes_run if abs(float(r["return_period"]) - 2.0) < 1e-9]
    assert len(row) == 1
    assert float(row[0]["reduced_variate"]) == pytest.approx(0.3665, abs=1e-4)


def test_profile_command(tmp_path, jan_stats_file, jan_fit):
    cfg = write_json(tmp_path / "c.json", {"fit": FAST_FIT, "profile": {"half_width": 0.2, "points": 5}})
    assert main(["profile", "--stats", str(jan_stats_file), "--params", str(jan_fit), "--months", "1",
                 "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "profile_01.csv")
    assert len(rows) == 6 * 5
    ci = json.loads((tmp_path / "ci_01.json").read_text())
    assert set(ci["confidence_intervals"]) == set(params("BLRPR_X", "Jan").names)
    lam = ci["confidence_intervals"]["lambda"]
    assert lam["lo"] is None or lam["lo"] < lam["estimate"]


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "blrain", "stats", "--data", str(tmp_path / "x.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert "x.csv" in r.stderr
