import json
import math

import numpy as np
import pytest

from margex.cli import run_cli
from margex.dataset import Dataset, Mode
from margex.errors import ParseError
from margex.estimation import fit
from margex.frailty import preset_scenario, simulate_dataset
from margex.io import read_csv, write_csv
from margex.report import read_report, report_from_fit, sha256_file, write_report


def write(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------- CSV ingestion


def test_two_row_file(tmp_path):
    d = read_csv(write(tmp_path / "d.csv", "cluster,y,x\n1,0,0.5\n1,1,-0.5\n"))
    assert d.n_covariates == 2 and d.n_clusters == 1 and d.mode is Mode.TWO_LEVEL
    assert d.covariate_names == ("(Intercept)", "x")
    np.testing.assert_array_equal(d.X[:, 0], 1.0)
    assert read_csv(tmp_path / "d.csv", intercept=False).n_covariates == 1


def test_longitudinal_layout(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["id,month,y,age_le20,female"]
    for pid in range(60):
        age, fem = rng.integers(0, 2, 2)
        for t in range(6):
            p = 1 / (1 + math.exp(-(1.0 - 0.3 * t + 0.4 * age)))
            rows.append(f"{pid},{t},{int(rng.random() < p)},{age},{fem}")
    text = "\n".join(rows).replace("id,month", "cluster,time") + "\n"
    d = read_csv(write(tmp_path / "m.csv", text))
    assert d.mode is Mode.TWO_LEVEL and d.n_clusters == 60 and d.n_covariates == 3
    np.testing.assert_array_equal(d.positions[:6], np.arange(6))
    res = fit(d, "ar1")
    assert res.converged and len(res.rho) == 1


def test_three_level_layout(tmp_path):
    rows = ["cluster,subject,time,y,x"]
    rng = np.random.default_rng(1)
    for district in range(10):
        for person in range(4):
            for year in range(4):
                rows.append(f"{district},{district * 100 + person},{year},{rng.integers(0, 2)},{rng.normal():.3f}")
    d = read_csv(write(tmp_path / "b.csv", "\n".join(rows) + "\n"))
    assert d.mode is Mode.THREE_LEVEL and d.n_obs == 160 and d.n_clusters == 10
    res = fit(d, "nested-exch")
    assert len(res.rho) == 2


@pytest.mark.parametrize(
    "text, row, message",
    [
        ("y,x\n0,1\n", 1, "cluster"),
        ("cluster,x\n1,1\n", 1, "'y'"),
        ("cluster,y,x\n1,0,1\n1,2,1\n", 3, "0 or 1"),
        ("cluster,y,x\n1,0,abc\n", 2, "not numeric"),
        ("cluster,y,x\n1,0,1\n1,NA,1\n", 3, "missing"),
        ("cluster,y,x\n1,0,\n", 2, "missing"),
        ("cluster,time,y\n1,0.5,1\n", 2, "integer"),
        ("cluster,y,x\n1,0\n", 2, "fields"),
        ("", 1, "header"),
        ("cluster,y\n", 2, "no data"),
    ],
)
def test_parse_errors(tmp_path, text, row, message):
    with pytest.raises(ParseError, match=message) as err:
        read_csv(write(tmp_path / "bad.csv", text))
    assert err.value.row == row
    assert f"row {row}" in str(err.value)


def test_duplicate_times_rejected(tmp_path):
    with pytest.raises(ParseError, match="unique"):
        read_csv(write(tmp_path / "dup.csv", "cluster,time,y\n1,0,1\n1,0,0\n"))


def test_round_trip_is_lossless(tmp_path):
    for name, rho in [("table1a", 0.5), ("table2", (0.3, 0.3))]:
        data = simulate_dataset(preset_scenario(name, rho, seed=3, cluster_count=30))
        write_csv(data, tmp_path / "s.csv")
        back = read_csv(tmp_path / "s.csv")
        for field in ("X", "y", "offsets", "positions", "subjects", "cluster_labels"):
            a, b = getattr(data, field), getattr(back, field)
            assert (a is None and b is None) or np.array_equal(a, b), field
        assert back.covariate_names == data.covariate_names


# ---------------------------------------------------------------- reports


@pytest.fixture(scope="module")
def fitted():
    data = simulate_dataset(preset_scenario("table1a", 0.5, seed=5))
    return data, fit(data, "exch")


def test_report_round_trip(tmp_path, fitted):
    data, res = fitted
    rep = report_from_fit(res, data, "exch", seed=5, input_sha256="abc")
    write_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back == rep
    raw = json.loads((tmp_path / "r.json").read_text())
    for key in ("beta", "or", "se_model", "se_robust", "ci_model", "ci_robust", "rho", "converged", "seed", "input_sha256"):
        assert key in raw
    np.testing.assert_allclose(raw["or"], np.exp(raw["beta"]), rtol=1e-12)
    for lo, hi in raw["ci_model"] + raw["ci_robust"]:
        assert lo < hi


def test_csv_report(tmp_path, fitted):
    data, res = fitted
    rep = report_from_fit(res, data, "exch")
    write_report(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().strip().split("\n")
    assert lines[0] == "term,coefficient,or,ci_low,ci_high"
    for line in lines[1:]:
        _, b, o, lo, hi = line.split(",")
        assert float(o) == pytest.approx(math.exp(float(b)), rel=1e-12)
        assert float(lo) < float(o) < float(hi)
    with pytest.raises(ValueError):
        write_report(rep, tmp_path / "r.txt", "xml")


def test_sha256(tmp_path):
    p = write(tmp_path / "a.txt", "abc")
    assert sha256_file(p) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


# ---------------------------------------------------------------- command line


def test_simulate_then_fit(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run_cli(["simulate", "--scenario", "table1a", "--rho", "0.5", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    out = tmp_path / "r.json"
    assert run_cli(["fit", "--data", str(a), "--structure", "exch", "--out", str(out), "--seed", "7"]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["beta"]) == 2 and len(rep["se_model"]) == 2 and len(rep["se_robust"]) == 2
    assert len(rep["rho"]) == 1 and rep["converged"] is True
    assert rep["input_sha256"] == sha256_file(a) and rep["seed"] == 7
    out2 = tmp_path / "r2.json"
    run_cli(["fit", "--data", str(a), "--structure", "exch", "--out", str(out2), "--seed", "7"])
    assert out.read_bytes() == out2.read_bytes()


def test_fit_mle_and_alternate(tmp_path):
    data = tmp_path / "d.csv"
    run_cli(["simulate", "--scenario", "table1a", "--rho", "0.3", "--clusters", "60", "--out", str(data)])
    assert run_cli(["fit", "--data", str(data), "--method", "mle", "--out", str(tmp_path / "m.json")]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert rep["method"] == "mle" and rep["se_robust"] == [None, None]
    assert run_cli(["fit", "--data", str(data), "--mode", "alternate", "--out", str(tmp_path / "a.csv")]) == 0


def test_mc_study_cli(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert run_cli(["mc-study", "--scenario", "table1a", "--rho", "0.5", "--reps", "3", "--clusters", "40",
                    "--workers", "1", "--out", str(out)]) == 0
    assert out.read_text().startswith("method,parameter")
    assert "per replicate" in capsys.readouterr().err


def test_verify_cli(capsys):
    assert run_cli(["verify"]) == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text and text.count("PASS") == 7


def test_exit_codes(tmp_path):
    assert run_cli([]) == 2
    assert run_cli(["fit"]) == 2
    assert run_cli(["fit", "--data", "x.csv", "--structure", "banana"]) == 2
    assert run_cli(["fit", "--data", str(tmp_path / "missing.csv")]) == 3
    bad = write(tmp_path / "bad.csv", "cluster,y\n1,5\n")
    assert run_cli(["fit", "--data", str(bad)]) == 3
    sep = write(tmp_path / "sep.csv", "cluster,y,x\n" + "".join(f"{i},{int(i >= 3)},{i - 2.5}\n" for i in range(6)))
    assert run_cli(["fit", "--data", str(sep), "--structure", "indep"]) == 4
    nested = write(tmp_path / "n.csv", "cluster,y,x\n1,0,1\n1,1,2\n2,0,1\n")
    assert run_cli(["fit", "--data", str(nested), "--structure", "nested-exch"]) == 3
    assert run_cli(["mc-study", "--scenario", "table1a", "--reps", "2"]) == 2
