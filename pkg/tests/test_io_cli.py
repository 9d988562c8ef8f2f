import json
import math

import numpy as np
import pytest

from mixexperts import InputError, io
from mixexperts.cli import PRESETS, chain_from_files, main
from mixexperts.experts import make_family


def test_json_roundtrip_exact_floats(tmp_path):
    vals = [0.1, 1 / 3, 2.0**-1074, 1e308, -0.0]
    io.write_json(tmp_path / "a.json", {"v": vals, "bad": [math.nan, math.inf], "flag": True})
    doc = io.read_json(tmp_path / "a.json")
    assert doc["v"] == vals
    assert doc["bad"] == [None, None]
    assert doc["schema_version"] == io.SCHEMA_VERSION


def test_read_json_rejects_other_schema(tmp_path):
    (tmp_path / "a.json").write_text('{"schema_version": 99}')
    with pytest.raises(InputError):
        io.read_json(tmp_path / "a.json")
    (tmp_path / "b.json").write_text('{"schema_version": 1,\n oops}')
    with pytest.raises(InputError, match="line 2"):
        io.read_json(tmp_path / "b.json")


def test_read_table_reports_line(tmp_path):
    (tmp_path / "d.csv").write_text("y,x\n1,2\n3,abc\n")
    with pytest.raises(InputError, match="line 3"):
        io.read_table(tmp_path / "d.csv")
    (tmp_path / "e.csv").write_text("y,x\n1,2,3\n")
    with pytest.raises(InputError, match="line 2"):
        io.read_table(tmp_path / "e.csv")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_model_json_roundtrip(name):
    model = PRESETS[name].model
    back = io.model_from_json(json.loads(io.dumps(io.model_to_json(model))))
    assert io.model_to_json(back) == io.model_to_json(model)


def test_rankings_csv_are_one_based(tmp_path):
    fam = make_family("plackett-luce", n_candidates=3)
    data = fam.dataset(np.array([[2, 0, -1], [1, 2, 0]]))
    header, rows = io.dataset_table(data)
    assert header == ["r1", "r2", "r3"]
    np.testing.assert_array_equal(rows, [[3, 1, 0], [2, 3, 1]])
    io.write_table(tmp_path / "r.csv", header, rows)
    back = io.load_dataset(tmp_path / "r.csv", fam, header)
    np.testing.assert_array_equal(back.outcomes, data.outcomes)


def _run(*argv):
    return main([str(a) for a in argv])


def test_simulate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert _run("simulate", "--preset", "binomial-t5", "--seed", 3, "--out", tmp_path / d) == 0
    for f in ("data.csv", "truth.csv", "params.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fit_em_and_params_roundtrip(tmp_path):
    assert _run("simulate", "--preset", "gaussian-gated", "--seed", 0, "--out", tmp_path) == 0
    rc = _run(
        "fit", "--data", tmp_path / "data.csv", "--family", "gaussian", "--variant", "c", "--components", 2,
        "--response", "y1", "y2", "--covariates", "x", "--crosstab", "x", "--seed", 0, "--out", tmp_path / "fit",
    )
    assert rc == 0
    fit = io.read_json(tmp_path / "fit" / "fit.json")
    assert fit["converged"]
    assert sum(map(sum, fit["crosstab"]["counts"])) == 200
    assert set(fit["map_labels"]) == {1, 2}
    params = io.read_json(tmp_path / "fit" / "params.json")
    assert set(params) >= {"model", "n", "seed", "source", "columns"}
    # fitted params feed back into simulate
    assert _run("simulate", "--params", tmp_path / "fit" / "params.json", "--seed", 1, "--out", tmp_path / "re") == 0


def test_fit_mcmc_then_diagnose_chain_dir(tmp_path):
    assert _run("simulate", "--preset", "binomial-t5", "--seed", 0, "--out", tmp_path) == 0
    rc = _run(
        "fit", "--data", tmp_path / "data.csv", "--family", "binomial", "--trials", 5, "--variant", "a",
        "--components", 2, "--method", "mcmc", "--iters", 700, "--burnin", 200, "--seed", 0, "--out", tmp_path / "mc",
    )
    assert rc == 0
    summary = io.read_json(tmp_path / "mc" / "summary.json")
    assert summary["shapes"] == {"pi": [2], "weights": [2]}
    lo, hi = summary["hpd95"]["pi[1]"]
    assert lo <= summary["posterior_mean"]["pi[1]"] <= hi
    chain = chain_from_files(tmp_path / "mc")
    assert chain.n_draws == 500
    assert _run("diagnose", "--chain", tmp_path / "mc", "--data", tmp_path / "data.csv", "--seed", 0, "--out", tmp_path / "dg") == 0
    report = io.read_json(tmp_path / "dg" / "report.json")
    assert report["condition"]["verdict"] == "identified"
    assert report["report"]["mode_census"]["n_modes"] >= 2


def test_diagnose_condition_only_lists_aliases(tmp_path):
    assert _run("diagnose", "--preset", "regression-design1", "--condition-only", "--out", tmp_path) == 0
    rep = io.read_json(tmp_path / "report.json")["report"]
    assert rep["verdict"] == "not-identified"
    assert rep["aliases"] == [{"beta": [[2, -3], [1, 3]]}]


def test_select_bic_with_failure_record(tmp_path):
    assert _run("simulate", "--preset", "binomial-t5", "--seed", 0, "--out", tmp_path) == 0
    rc = _run(
        "select", "--data", tmp_path / "data.csv", "--family", "binomial", "--trials", 5, "--variant", "a",
        "--components", 1, 2, "--seed", 0, "--out", tmp_path / "sel",
    )
    assert rc == 0
    table = io.read_json(tmp_path / "sel" / "select.json")
    assert [r["name"] for r in table["rows"]] == ["G=1", "G=2"]
    assert table["winner"] in ("G=1", "G=2")


def test_select_markov_reports_exact_and_is(tmp_path, rng):
    series = rng.integers(2, size=(30, 5))
    io.write_table(tmp_path / "m.csv", [f"t{j}" for j in range(5)], series)
    rc = _run(
        "select", "--data", tmp_path / "m.csv", "--family", "markov", "--states", 2, "--n-times", 4, "--variant", "a",
        "--components", 1, 2, "--response", *[f"t{j}" for j in range(5)], "--criterion", "log-marglik",
        "--iters", 600, "--burnin", 200, "--is-draws", 2000, "--seed", 0, "--out", tmp_path / "sel",
    )
    assert rc == 0
    rows = io.read_json(tmp_path / "sel" / "select.json")["rows"]
    assert rows[0]["exact"] == pytest.approx(rows[0]["value"], abs=1e-6)
    assert "exact" not in rows[1]


def test_exit_codes(tmp_path, capsys):
    assert _run("fit", "--data", tmp_path / "missing.csv", "--family", "gaussian", "--variant", "a", "--components", 2) == 2
    assert _run("fit", "--family", "binomial", "--variant", "a", "--components", 2, "--data", "x.csv") == 2
    assert _run("diagnose", "--preset", "nope", "--out", tmp_path) == 2
    (tmp_path / "bad.csv").write_text("y\n1\nx\n")
    assert _run("fit", "--data", tmp_path / "bad.csv", "--family", "binomial", "--trials", 2, "--variant", "a", "--components", 1) == 2
    assert "line 3" in capsys.readouterr().err
