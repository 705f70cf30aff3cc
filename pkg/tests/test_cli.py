import csv
import json

import numpy as np
import pytest

from smoothhmm.cli import main
from smoothhmm.io import (InputError, format_value, read_csv, read_json, spec_from_dict, spec_to_dict,
                          validate, write_csv)
from smoothhmm.sim import BenchmarkGenerator, SimScenario, StudyFitConfig, run_study

BENCHMARK_MODEL = {"schema_version": 1, "n_states": 2,
                  "streams": [{"column": "x", "family": "gaussian"}],
                  "tpm_smooths": [{"from": "all", "to": "all", "covariate": "z", "n_basis": 15,
                                   "domain": [0, 1], "lambda0": 1000}]}


def dump(path, doc):
    path.write_text(json.dumps(doc))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.split(), err


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    scen = dump(d / "scen.json", {"generator": {"type": "benchmark"}, "T": 600, "seed": 4})
    assert main(["simulate", str(scen), "--out", str(d / "sim.csv")]) == 0
    return d / "sim.csv"


@pytest.fixture(scope="module")
def fitted(tmp_path_factory, sim_csv):
    d = tmp_path_factory.mktemp("fit")
    model = dump(d / "model.json", BENCHMARK_MODEL)
    code = main(["fit", str(sim_csv), str(model), "--out-dir", str(d / "out"), "--n-draws", "100",
                 "--plots"])
    return code, d / "out"


# ------------------------------------------------------------------ io


def test_csv_roundtrip_and_format(tmp_path):
    x = np.array([0.1, 1 / 3, np.nan, 1e-300, -2.5e17])
    write_csv(tmp_path / "a.csv", {"time": np.arange(1, 6), "x": x})
    text = (tmp_path / "a.csv").read_text().splitlines()
    assert text[0] == "time,x" and text[3] == "3,NA"
    back = read_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back["x"], x)
    assert format_value(0.1) == "0.1" and format_value(True) == "true"
    assert float(format_value(1 / 3)) == 1 / 3


def test_csv_errors(tmp_path):
    (tmp_path / "bad.csv").write_text("x,z\n1,2\n3,abc\n")
    with pytest.raises(InputError, match=r"bad.csv:3:2"):
        read_csv(tmp_path / "bad.csv")
    (tmp_path / "ragged.csv").write_text("x,z\n1\n")
    with pytest.raises(InputError, match=":2:"):
        read_csv(tmp_path / "ragged.csv")
    (tmp_path / "time.csv").write_text("time,x\n2,1\n1,1\n")
    with pytest.raises(InputError, match="time"):
        read_csv(tmp_path / "time.csv")
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(InputError):
        read_csv(tmp_path / "empty.csv")
    with pytest.raises(InputError):
        read_csv(tmp_path / "missing.csv")


def test_true_state_column(tmp_path):
    (tmp_path / "s.csv").write_text("x,true_state\n0.5,1\n0.7,2\n")
    d = read_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(d.states, [0, 1])
    assert "true_state" not in d.columns


def test_json_errors_report_location(tmp_path):
    (tmp_path / "a.json").write_text('{\n  "T": 5,\n  "generator": {"type": "benchmark"},,\n}')
    with pytest.raises(InputError, match=r"a.json:3:\d+"):
        read_json(tmp_path / "a.json", "scenario")
    with pytest.raises(InputError, match=r"\$\.streams\[0\]\.family"):
        validate({"n_states": 2, "streams": [{"column": "x", "family": "normal"}]}, "model")


def test_spec_roundtrip_and_all_expansion():
    doc = {"n_states": 3, "streams": [
        {"column": "x", "family": "gaussian",
         "smooths": [{"parameter": "mean", "state": "all", "covariate": "z", "n_basis": 8}]},
        {"column": "y", "family": "spline", "n_basis": 12, "domain": [0, 5]}],
        "tpm_smooths": [{"from": 1, "to": "all", "covariate": "w", "cyclic": True, "domain": [0, 24]}],
        "initial": "uniform"}
    spec, q = spec_from_dict(doc)
    assert [es.state for es in spec.streams[0].smooths] == [0, 1, 2]
    assert [(t.i, t.j) for t in spec.tpm_smooths] == [(0, 1), (0, 2)]
    again, _ = spec_from_dict(spec_to_dict(spec))
    assert again == spec
    with pytest.raises(InputError):
        spec_from_dict({**doc, "tpm_smooths": [{"from": 2, "to": 2, "covariate": "w"}]})
    with pytest.raises(InputError):
        spec_from_dict({**doc, "tpm_smooths": [{"from": 4, "to": 1, "covariate": "w"}]})


# ------------------------------------------------------------------ simulate


def test_simulate_byte_identical(tmp_path, capsys):
    scen = dump(tmp_path / "s.json", {"generator": {"type": "benchmark"}, "T": 300, "seed": 11})
    run(["simulate", scen, "--out", tmp_path / "a.csv"], capsys)
    run(["simulate", scen, "--out", tmp_path / "b.csv"], capsys)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "time,x,z,true_state"


def test_simulate_moments(tmp_path, capsys):
    scen = dump(tmp_path / "s.json", {"generator": {"type": "benchmark"}, "T": 100000, "seed": 2})
    code, out, _ = run(["simulate", scen, "--out", tmp_path / "big.csv"], capsys)
    assert code == 0
    d = read_csv(out[0])
    for k, (mu, sd) in enumerate([(1, 1), (5, 3)]):
        x = d["x"][d.states == k]
        assert abs(x.mean() - mu) < 3 * sd / np.sqrt(x.size)


def test_simulate_missing_T(tmp_path, capsys):
    scen = dump(tmp_path / "s.json", {"generator": {"type": "benchmark"}})
    code, _, err = run(["simulate", scen], capsys)
    assert code == 2 and "'T'" in err


def test_simulate_parametric_and_env_output_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SMOOTHHMM_OUTPUT_DIR", str(tmp_path / "envout"))
    scen = dump(tmp_path / "p.json", {"generator": {
        "type": "parametric", "tpm": [[0.9, 0.1], [0.2, 0.8]], "initial": [1, 0],
        "streams": [{"column": "step", "family": "gamma", "params": {"mean": [1, 4], "sd": [0.5, 2]}}]},
        "T": 50, "seed": 0})
    code, out, _ = run(["simulate", scen], capsys)
    assert code == 0 and out[0] == str(tmp_path / "envout" / "simulated.csv")
    bad = dump(tmp_path / "q.json", {"generator": {"type": "parametric", "tpm": [[0.9, 0.2], [0.2, 0.8]],
               "streams": [{"column": "x", "family": "gaussian", "params": {"mean": [0, 1], "sd": [1, 1]}}]},
               "T": 50})
    assert run(["simulate", bad], capsys)[0] == 2


# ------------------------------------------------------------------ fit / decode


def test_fit_artifacts(fitted, capsys):
    code, out = fitted
    assert code == 0
    report = read_json(out / "fit_report.json", "fit_report")
    assert report["converged"]
    assert len(report["lambda_trace"]) == report["n_outer"] + 1
    for name in ("states.csv", "curves.csv", "curves.svg", "lambda_trace.svg", "series.svg"):
        assert (out / name).exists()
    text = (out / "fit_report.json").read_text()
    assert json.dumps(json.loads(text), indent=2) + "\n" == text
    names = [p["name"] for p in report["parameters"]]
    assert "x.mean[1]" in names and "tpm[1,2]" in names
    assert all(p["se"] > 0 for p in report["parameters"])
    with open(out / "curves.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["curve"] for r in rows} == {"gamma[1,2]|z", "gamma[2,1]|z"}
    assert all(float(r["lower"]) <= float(r["estimate"]) + 1e-12 <= float(r["upper"]) + 2e-12 for r in rows)


def test_decode_matches_embedded_path(fitted, sim_csv, tmp_path, capsys):
    _, out = fitted
    code, paths, _ = run(["decode", sim_csv, out / "fit_report.json", "--out", tmp_path / "d.csv"], capsys)
    assert code == 0
    with open(paths[0]) as fh:
        rows = list(csv.DictReader(fh))
    report = json.loads((out / "fit_report.json").read_text())
    assert [int(r["state"]) for r in rows] == report["decoded_states"]
    probs = np.array([[float(r["p1"]), float(r["p2"])] for r in rows])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-8)
    assert (tmp_path / "d.csv").read_text() == (out / "states.csv").read_text()


def test_decode_mismatch_exit_2(fitted, tmp_path, capsys):
    _, out = fitted
    (tmp_path / "other.csv").write_text("y\n1\n2\n")
    assert run(["decode", tmp_path / "other.csv", out / "fit_report.json"], capsys)[0] == 2
    dump(tmp_path / "junk.json", {"schema": "nope"})
    assert run(["decode", tmp_path / "other.csv", tmp_path / "junk.json"], capsys)[0] == 2


def test_fit_without_smooths_and_single_state(sim_csv, tmp_path, capsys):
    m = dump(tmp_path / "m.json", {"n_states": 2, "streams": [{"column": "x", "family": "gaussian"}]})
    code, _, _ = run(["fit", sim_csv, m, "--out-dir", tmp_path / "o", "--n-draws", "10"], capsys)
    rep = json.loads((tmp_path / "o" / "fit_report.json").read_text())
    assert code == 0 and rep["n_outer"] == 1 and rep["smooths"] == [] and rep["lambda"] == []
    m1 = dump(tmp_path / "m1.json", {"n_states": 1, "streams": [{"column": "x", "family": "gaussian"}]})
    code, _, _ = run(["fit", sim_csv, m1, "--out-dir", tmp_path / "o1", "--n-draws", "10"], capsys)
    assert code == 0
    code, paths, _ = run(["decode", sim_csv, tmp_path / "o1" / "fit_report.json", "--out",
                          tmp_path / "d1.csv"], capsys)
    with open(paths[0]) as fh:
        assert {r["state"] for r in csv.DictReader(fh)} == {"1"}


def test_lambda0_override_and_nonconvergence(sim_csv, tmp_path, capsys):
    model = dump(tmp_path / "m.json", BENCHMARK_MODEL)
    code, _, err = run(["fit", sim_csv, model, "--out-dir", tmp_path / "o", "--lambda0", "1e5,1e5",
                        "--max-outer", "2", "--n-draws", "0"], capsys)
    assert code == 3 and "converge" in err
    rep = json.loads((tmp_path / "o" / "fit_report.json").read_text())
    assert rep["lambda_trace"][0] == [1e5, 1e5]
    assert not rep["converged"]
    assert run(["fit", sim_csv, model, "--lambda0", "1,2,3"], capsys)[0] == 2
    assert run(["fit", sim_csv, model, "--lambda0", "abc"], capsys)[0] == 2


def test_fit_input_errors(sim_csv, tmp_path, capsys):
    bad = dump(tmp_path / "bad.json", {"n_states": 2, "streams": [{"column": "nope", "family": "gaussian"}]})
    assert run(["fit", sim_csv, bad], capsys)[0] == 2
    (tmp_path / "syntax.json").write_text("{\"n_states\": 2,\n")
    code, _, err = run(["fit", sim_csv, tmp_path / "syntax.json"], capsys)
    assert code == 2 and "syntax.json:2:" in err
    assert run(["fit", tmp_path / "absent.csv", bad], capsys)[0] == 2
    assert run(["frobnicate"], capsys)[0] == 2


def test_numerical_failure_exit_4(sim_csv, tmp_path, capsys):
    m = dump(tmp_path / "m.json", {"n_states": 2, "streams": [
        {"column": "x", "family": "gaussian", "init": {"mean": [0, 1], "sd": [1e-300, 1e-300]}}]})
    code, _, err = run(["fit", sim_csv, m, "--out-dir", tmp_path / "o"], capsys)
    assert code == 4 and "fit" in err


def test_fitted_generator_scenario(fitted, tmp_path, capsys):
    _, out = fitted
    scen = dump(tmp_path / "s.json", {"generator": {"type": "fitted", "path": str(out / "fit_report.json")},
                                      "T": 200, "seed": 1})
    code, paths, _ = run(["simulate", scen, "--out", tmp_path / "f.csv"], capsys)
    assert code == 0
    assert read_csv(paths[0]).T == 200


# ------------------------------------------------------------------ study


def test_study_cli_and_jobs(tmp_path, capsys):
    st = dump(tmp_path / "st.json", {"T": [150], "n_reps": 2, "seed": 3, "fit": {"max_outer": 3}})
    c1, p1, _ = run(["study", st, "--out-dir", tmp_path / "a", "--jobs", "1"], capsys)
    c2, p2, _ = run(["study", st, "--out-dir", tmp_path / "b", "--jobs", "3", "--plots"], capsys)
    assert c1 == c2 == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()
    for p in p1 + p2:
        assert (tmp_path / p).exists() or __import__("pathlib").Path(p).exists()
    read_json(tmp_path / "a" / "summary.json", "study_summary")


def test_study_zero_replicates(tmp_path, capsys):
    st = dump(tmp_path / "st.json", {"T": [100], "n_reps": 0})
    assert run(["study", st], capsys)[0] == 2
    assert run(["study", st, "--jobs", "0"], capsys)[0] == 2


def _cli_rmse(tmp_path, capsys, seed, rep):
    scen = dump(tmp_path / f"s{seed}.json", {"generator": {"type": "benchmark"}, "T": 5000, "seed": seed})
    run(["simulate", scen, "--out", tmp_path / f"d{seed}.csv", "--rep", rep], capsys)
    model = dump(tmp_path / "m.json", {**BENCHMARK_MODEL, "qreml": {"tol": 1e-5, "max_outer": 60}})
    out = tmp_path / f"o{seed}"
    code, _, _ = run(["fit", tmp_path / f"d{seed}.csv", model, "--out-dir", out, "--n-draws", "0",
                      "--grid-size", "200"], capsys)
    assert code == 0
    report = json.loads((out / "fit_report.json").read_text())
    # curves.csv spans the observed covariate range; score on the study grid instead
    from smoothhmm.cli import model_from_report
    model_obj = model_from_report(report, read_csv(tmp_path / f"d{seed}.csv"))
    z = np.linspace(0, 1, 200)
    est = model_obj.curves(np.asarray(report["theta_hat"]), {"z": z})
    truth = BenchmarkGenerator().truth(z)
    return report, {k: float(np.sqrt(np.mean((est[k] - truth[k]) ** 2))) for k in truth}


@pytest.mark.slow
def test_fit_benchmark_t5000_against_study(tmp_path, capsys):
    seed = 17
    study = run_study([SimScenario(BenchmarkGenerator(), 5000, 50, seed)], StudyFitConfig())
    summary = study.summary()[0]
    report, rmse = _cli_rmse(tmp_path, capsys, seed, 0)
    for name, v in rmse.items():
        assert v == pytest.approx(study.rows[0][f"rmse.{name}"], rel=1e-8)
    # a replicate outside the reference study
    report, rmse = _cli_rmse(tmp_path, capsys, seed + 1000, 0)
    assert 8 <= len(report["lambda_trace"]) <= 18
    for name, v in rmse.items():
        assert v < summary[f"median.rmse.{name}"] + 2 * summary[f"iqr.rmse.{name}"]


@pytest.mark.parametrize("name,schema", [("model", "model"), ("scenario", "scenario"), ("study", "study")])
def test_demo_inputs_validate(name, schema):
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "demos" / "cli" / f"{name}.json"
    read_json(path, schema)
