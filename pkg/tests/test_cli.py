import csv
import hashlib
import json

import numpy as np
import pytest
from statistics import NormalDist

from balance_att.cli import main, parse_grid
from balance_att.data_model import Dataset, write_csv
from conftest import make_dataset


@pytest.fixture
def data_file(tmp_path):
    ds = make_dataset(n=300, p=6, seed=21, intercept=False)
    path = tmp_path / "data.csv"
    write_csv(path, ds, "y", "d")
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_estimate_json_schema(data_file, tmp_path, capsys):
    out = tmp_path / "est.json"
    code, _, _ = run(["estimate", "--input", data_file, "--outcome", "y", "--treatment", "d",
                      "--estimator", "immunized", "--out", out], capsys)
    assert code == 0
    doc = json.loads(out.read_text())
    est = doc["estimates"]["immunized"]
    assert {"theta", "se", "ci_low", "ci_high"} <= set(est)
    diag = est["diagnostics"]
    assert {"lam", "lam_prime", "beta_active", "mu_active", "beta_kkt", "mu_kkt"} <= set(diag)
    assert "weight_summary" in est
    prov = doc["provenance"]
    assert prov["version"] and prov["config"]["gamma"] == 0.05 and prov["seed"] == 0
    assert prov["input_sha256"] == hashlib.sha256(data_file.read_bytes()).hexdigest()


def test_estimate_alpha_quantile(data_file, capsys):
    code, out, _ = run(["estimate", "--input", data_file, "--outcome", "y", "--treatment", "d",
                        "--estimator", "naive", "--alpha", "0.10"], capsys)
    assert code == 0
    e = json.loads(out)["estimates"]["naive"]
    z = NormalDist().inv_cdf(0.95)
    assert e["ci_high"] - e["theta"] == pytest.approx(z * e["se"], rel=1e-12)


def test_estimate_all_five_csv(data_file, tmp_path, capsys):
    out = tmp_path / "est.csv"
    before = data_file.read_bytes()
    code, _, _ = run(["estimate", "--input", data_file, "--outcome", "y", "--treatment", "d",
                      "--format", "csv", "--out", out], capsys)
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["estimator"] for r in rows] == ["naive", "immunized", "farrell", "double_selection", "ols"]
    assert all(r["error"] == "" for r in rows)
    assert (tmp_path / "est.csv.provenance.json").exists()
    assert data_file.read_bytes() == before


def test_usage_errors(data_file, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--input", str(data_file), "--outcome", "y", "--treatment", "d",
              "--estimator", "bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--reps", "0"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--grid", "n=500"])
    assert exc.value.code == 2


def test_runtime_error_single_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,d,x\n1,2,0\n2,0,1\n")
    code, _, err = run(["estimate", "--input", bad, "--outcome", "y", "--treatment", "d"], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    assert len(lines) == 1
    msg = json.loads(lines[0])
    assert msg["error"] == "DataError" and "treatment not binary" in msg["message"]


def test_grid_parser():
    assert parse_grid("n=500,1000 p=50") == [(500, 50), (1000, 50)]


def test_simulate_deterministic(tmp_path, capsys, monkeypatch):
    args = ["simulate", "--grid", "n=200,300 p=20", "--reps", "4", "--seed", "7", "--format", "csv"]
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    assert run(args + ["--out", a], capsys)[0] == 0
    assert run(args + ["--out", b], capsys)[0] == 0
    assert run(args + ["--out", c, "--jobs", "2"], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes() == c.read_bytes()
    assert (tmp_path / "a.csv.provenance.json").read_bytes() == (tmp_path / "a.csv.provenance.json").read_bytes()
    rows = list(csv.DictReader(a.open()))
    assert {r["estimator"] for r in rows} == {"naive", "immunized", "farrell", "oracle"}
    monkeypatch.setenv("BALANCE_ATT_SEED", "7")
    code, out, _ = run(["simulate", "--grid", "n=200,300 p=20", "--reps", "4", "--format", "csv"], capsys)
    assert out == a.read_text()
    code, out, _ = run(["simulate", "--grid", "n=200 p=20", "--reps", "2", "--format", "json"], capsys)
    prov = json.loads(out)["provenance"]
    assert prov["seed"] == 7 and prov["seed_source"] == "env"


def test_expand(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 40
    X = np.column_stack([rng.normal(size=(n, 4)), rng.integers(0, 2, size=(n, 6))]).astype(float)
    names = tuple(f"c{j}" for j in range(4)) + tuple(f"u{j}" for j in range(6))
    src = tmp_path / "raw.csv"
    write_csv(src, Dataset(rng.normal(size=n), np.tile([0.0, 1.0], n // 2), X, names), "y", "d")
    out = tmp_path / "wide.csv"
    code, _, _ = run(["expand", "--input", src, "--outcome", "y", "--treatment", "d", "--out", out], capsys)
    assert code == 0
    header = next(csv.reader(out.open()))
    assert len(header) == 2 + 65
    assert json.loads((tmp_path / "wide.csv.provenance.json").read_text())["columns_out"] == 65


def _panel(path, n=60, single=False):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(n, 3))
    d = np.zeros(n)
    if single:
        d[0] = 1
    else:
        d[: n // 3] = 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "a", "b", "c", "y1", "y2", "y3"])
        for i in range(n):
            w.writerow([int(d[i]), *X[i], X[i].sum() + rng.normal(), 4.0, X[i].sum() + 2 * d[i]])
    return path


def test_series(tmp_path, capsys):
    src = _panel(tmp_path / "panel.csv")
    out = tmp_path / "series.csv"
    code, _, err = run(["series", "--input", src, "--outcome", "y1,y2,y3", "--treatment", "d",
                        "--out", out], capsys)
    assert code == 0 and "warning" not in err
    rows = list(csv.DictReader(out.open()))
    assert [r["period"] for r in rows] == ["y1", "y2", "y3"]
    assert list(rows[0]) == ["period", "theta", "se", "ci_low", "ci_high", "counterfactual_level"]
    assert float(rows[1]["theta"]) == pytest.approx(0.0, abs=1e-10)


def test_series_single_treated_warns(tmp_path, capsys):
    src = _panel(tmp_path / "panel.csv", single=True)
    code, out, err = run(["series", "--input", src, "--outcome", "y1,y3", "--treatment", "d",
                          "--covariates", "a,b,c"], capsys)
    assert code == 0
    assert "warning" in err and "one treated" in err
    assert len(out.strip().splitlines()) == 3
