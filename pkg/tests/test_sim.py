import numpy as np
import pytest

from smoothhmm.errors import ConfigError
from smoothhmm.model import Model, ModelSpec, SmoothSpec, StreamSpec, TransitionSmooth
from smoothhmm.qreml import QremlConfig, qreml_fit
from smoothhmm.sim import (BenchmarkGenerator, FittedGenerator, ParametricGenerator, SimScenario,
                           StudyFitConfig, rng_for, run_study, sample_spline_density, simulate)
from smoothhmm.basis import BasisConfig, full_design
from scipy import stats


def test_benchmark_curves_at_zero():
    g = BenchmarkGenerator()
    assert g.gamma12(0.0) == pytest.approx(1 / (1 + np.exp(1)), abs=1e-12)
    assert g.gamma12(0.0) == pytest.approx(0.2689, abs=1e-4)
    assert g.gamma21(0.0) == pytest.approx(0.7311, abs=1e-4)
    G = g.tpm({"z": np.array([0.0, 0.5])})
    np.testing.assert_allclose(G.sum(axis=-1), 1.0)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        SimScenario(BenchmarkGenerator(), 1)
    with pytest.raises(ConfigError):
        SimScenario(BenchmarkGenerator(), 10, n_reps=0)
    with pytest.raises(ConfigError):
        SimScenario(BenchmarkGenerator(), 10, covariate_law="supplied")


def test_determinism_and_independence():
    sc = SimScenario(BenchmarkGenerator(), 500, 3, seed=9)
    a, b = simulate(sc, 1), simulate(sc, 1)
    for k in a.columns:
        np.testing.assert_array_equal(a[k], b[k])
    np.testing.assert_array_equal(a.states, b.states)
    c = simulate(sc, 2)
    assert not np.array_equal(a["x"], c["x"])
    # replicate streams do not depend on which replicates were drawn before
    simulate(sc, 0)
    np.testing.assert_array_equal(simulate(sc, 1)["x"], a["x"])
    assert rng_for(9, 1, 0).random() != rng_for(9, 1, 1).random()


def test_absorbing_start_stays_put():
    gen = ParametricGenerator([[1 - 1e-12, 1e-12], [1e-12, 1 - 1e-12]],
                              [("x", "gaussian", {"mean": [0.0, 1.0], "sd": [1.0, 1.0]})],
                              initial=[1.0, 0.0])
    data = simulate(SimScenario(gen, 2000, seed=1), 0)
    assert (data.states == 0).all()


def test_transition_frequencies_match_curves():
    sc = SimScenario(BenchmarkGenerator(), 1_000_000, seed=3)
    data = simulate(sc, 0)
    z, s = data["z"], data.states
    prev, cur, zt = s[:-1], s[1:], z[1:]
    bins = np.minimum((zt * 20).astype(int), 19)
    g = BenchmarkGenerator()
    dev = 0.0
    for k in range(20):
        mid = (k + 0.5) / 20
        sel0 = (bins == k) & (prev == 0)
        sel1 = (bins == k) & (prev == 1)
        # compare against the bin average of the analytic curve
        zz = np.linspace(k / 20, (k + 1) / 20, 201)
        dev = max(dev, abs(cur[sel0].mean() - g.gamma12(zz).mean()),
                  abs(1 - cur[sel1].mean() - g.gamma21(zz).mean()))
        assert np.isfinite(mid)
    assert dev < 0.02


def test_emission_moments():
    data = simulate(SimScenario(BenchmarkGenerator(), 100_000, seed=4), 0)
    for state, (mu, sd) in enumerate([(1.0, 1.0), (5.0, 3.0)]):
        x = data["x"][data.states == state]
        n = x.size
        assert abs(x.mean() - mu) < 3 * sd / np.sqrt(n)
        assert abs(x.std(ddof=1) - sd) < 3 * sd / np.sqrt(2 * (n - 1))


def test_parametric_generator_gamma_vonmises():
    gen = ParametricGenerator([[0.9, 0.1], [0.2, 0.8]],
                              [("step", "gamma", {"mean": [0.5, 3.0], "sd": [0.3, 1.0]}),
                               ("angle", "vonmises", {"mean": [0.0, 1.0], "concentration": [0.5, 5.0]})])
    data = simulate(SimScenario(gen, 50_000, seed=5), 0)
    assert (data["step"] > 0).all()
    assert (data["angle"] > -np.pi).all() and (data["angle"] <= np.pi).all()
    x = data["step"][data.states == 1]
    assert abs(x.mean() - 3.0) < 3 * 1.0 / np.sqrt(x.size)
    with pytest.raises(ConfigError):
        ParametricGenerator([[1.0]], [("x", "gaussian", {"mean": [0.0]})])


def test_spline_density_sampler_matches_density():
    cfg = BasisConfig(10, 3, (0.0, 4.0))
    w = np.random.default_rng(0).dirichlet(np.ones(10))
    x = sample_spline_density(np.random.default_rng(1), cfg, np.tile(w, (20000, 1)))
    c = (cfg.knots()[4:] - cfg.knots()[:-4]) / 4
    grid = np.linspace(0, 4, 4001)
    pdf = full_design(cfg, grid) / c @ w
    cdf = np.concatenate([[0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))])
    res = stats.kstest(x, lambda v: np.interp(v, grid, cdf))
    assert res.pvalue > 1e-3


def test_fitted_generator_roundtrip():
    sc = SimScenario(BenchmarkGenerator(), 800, seed=6)
    data = simulate(sc, 0)
    sm = SmoothSpec("z", 8, domain=(0, 1))
    spec = ModelSpec(2, [StreamSpec("x", "gaussian")], [TransitionSmooth(0, 1, sm), TransitionSmooth(1, 0, sm)])
    m = Model(spec, data)
    res = qreml_fit(m, QremlConfig(max_outer=5))
    gen = FittedGenerator(m, res.fit.theta_hat)
    sim = simulate(SimScenario(gen, 20000, seed=1), 0)
    means = [sim["x"][sim.states == k].mean() for k in range(2)]
    nat = m.natural_params(res.fit.theta_hat)
    assert means[0] == pytest.approx(nat["x.mean[1]"], abs=0.1)
    assert means[1] == pytest.approx(nat["x.mean[2]"], abs=0.2)


def test_study_smoke_path(tmp_path):
    sc = SimScenario(BenchmarkGenerator(), 200, 1, seed=1)
    rep = run_study([sc], StudyFitConfig(max_outer=2))
    assert len(rep.rows) == 1
    row = rep.rows[0]
    assert row["converged"] in (True, False)
    paths = rep.write(tmp_path)
    for p in paths.values():
        assert p.exists()
    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "scenario,curve,rep,z,truth,estimate"
    assert len(curves) == 1 + 2 * 200


def test_study_records_failures():
    class Broken(BenchmarkGenerator):
        def emit(self, rng, states, covariates):
            return {"x": np.full(states.size, np.nan)}

    rep = run_study([SimScenario(Broken(), 50, 2, seed=1)], StudyFitConfig(max_outer=2))
    assert all(r["error"] for r in rep.rows)
    assert rep.summary()[0]["failure_rate"] == 1.0


def test_study_jobs_do_not_change_results():
    scs = [SimScenario(BenchmarkGenerator(), 150, 2, seed=2, label="a")]
    cfg = StudyFitConfig(max_outer=3)
    r1 = run_study(scs, cfg, jobs=1)
    r2 = run_study(scs, cfg, jobs=2)
    assert r1.rows == r2.rows
    assert r1.summary() == r2.summary()
