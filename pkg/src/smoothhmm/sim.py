"""Seeded simulation and a replicated-fit study runner.

Every replicate draws from its own ``numpy`` generator keyed by
``(seed, rep_index, stream)`` through :class:`numpy.random.SeedSequence`
spawn keys, so replicates are independent of execution order and of the
number of worker processes.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from .basis import full_design
from .emission import get_family
from .errors import ConfigError
from .hmm import stationary, tpm_multinomial
from .model import Dataset, Model, ModelSpec, SmoothSpec, StreamSpec, TransitionSmooth
from .qreml import QremlConfig, qreml_fit, roughness

log = logging.getLogger(__name__)

STREAM_COVARIATES, STREAM_STATES, STREAM_EMISSIONS = 0, 1, 2


def rng_for(seed: int, rep_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(rep_index), int(stream))))


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


class Generator:
    """Data-generating HMM; subclasses define transitions and emissions."""

    n_states: int
    covariate_names: tuple[str, ...] = ()
    initial_distribution: np.ndarray | None = None

    def tpm(self, covariates: dict) -> np.ndarray:
        raise NotImplementedError

    def emit(self, rng, states, covariates: dict) -> dict:
        raise NotImplementedError

    def stream_specs(self) -> list[StreamSpec]:
        """Observation streams a study fit uses for this generator."""
        raise NotImplementedError

    def initial(self, covariates: dict) -> np.ndarray:
        if self.initial_distribution is not None:
            return np.asarray(self.initial_distribution, dtype=float)
        G = np.asarray(self.tpm(covariates))
        if G.ndim == 3:
            G = G.mean(axis=0)
        return stationary(G)


class ParametricGenerator(Generator):
    """Homogeneous chain with fixed state-dependent parameters.

    ``streams`` is a list of ``(column, family, {param: per-state values})``.
    """

    def __init__(self, gamma, streams, initial=None):
        self.gamma = np.asarray(gamma, dtype=float)
        self.n_states = self.gamma.shape[0]
        self.streams = [(c, f, {k: np.asarray(v, dtype=float) for k, v in p.items()})
                        for c, f, p in streams]
        self.initial_distribution = None if initial is None else np.asarray(initial, dtype=float)
        for _, fam, params in self.streams:
            missing = set(get_family(fam).params) - set(params)
            if missing:
                raise ConfigError(f"{fam} stream lacks parameters {sorted(missing)}")

    def tpm(self, covariates):
        return self.gamma

    def stream_specs(self):
        return [StreamSpec(c, f) for c, f, _ in self.streams]

    def emit(self, rng, states, covariates):
        out = {}
        for col, fam, params in self.streams:
            family = get_family(fam)
            out[col] = family.sample(rng, *(params[p][states] for p in family.params))
        return out


class BenchmarkGenerator(Generator):
    """Two-state Gaussian HMM whose off-diagonal transition logits vary with ``z ~ U(0, 1)``.

    ``logit gamma_12 = -2 + sin(3 pi z) + exp(1.5 z)``,
    ``logit gamma_21 = 2 + cos(4 pi z) - 2 exp(z)``; means (1, 5), sds (1, 3).
    """

    n_states = 2
    covariate_names = ("z",)
    means = np.array([1.0, 5.0])
    sds = np.array([1.0, 3.0])

    @staticmethod
    def gamma12(z):
        return _logistic(-2.0 + np.sin(3 * np.pi * z) + np.exp(1.5 * z))

    @staticmethod
    def gamma21(z):
        return _logistic(2.0 + np.cos(4 * np.pi * z) - 2.0 * np.exp(z))

    def tpm(self, covariates):
        z = np.atleast_1d(np.asarray(covariates["z"], dtype=float))
        g12, g21 = self.gamma12(z), self.gamma21(z)
        G = np.empty((z.size, 2, 2))
        G[:, 0, 0], G[:, 0, 1] = 1 - g12, g12
        G[:, 1, 0], G[:, 1, 1] = g21, 1 - g21
        return G

    def stream_specs(self):
        return [StreamSpec("x", "gaussian")]

    def emit(self, rng, states, covariates):
        return {"x": rng.normal(self.means[states], self.sds[states])}

    def truth(self, grid) -> dict:
        return {"gamma[1,2]|z": self.gamma12(grid), "gamma[2,1]|z": self.gamma21(grid)}


class FittedGenerator(Generator):
    """Simulate from a compiled :class:`Model` at parameter ``theta``."""

    def __init__(self, model: Model, theta):
        self.model = model
        self.theta = np.asarray(theta, dtype=float)
        self.n_states = model.N
        self.covariate_names = tuple(model.spec.covariates)

    def stream_specs(self):
        return [replace(st, smooths=[]) for st in self.model.spec.streams]

    def tpm(self, covariates):
        G = self.model.tpm_at(self.theta, covariates)
        return G[0] if self.model.homogeneous else G

    def emit(self, rng, states, covariates):
        T = states.size
        params = self.model.emission_params_at(self.theta, covariates)
        out = {}
        for s in self.model.streams:
            col = s.spec.column
            if s.family is None:
                W = self.model.density_weights(self.theta)[col]
                out[col] = sample_spline_density(rng, s.basis, W[states])
                continue
            fam = s.family
            vals = [params[(col, p)] for p in fam.params]
            vals = [np.broadcast_to(v, (T, self.n_states))[np.arange(T), states] for v in vals]
            out[col] = fam.sample(rng, *vals)
        return out


def sample_spline_density(rng, config, weights, n_grid: int = 4097) -> np.ndarray:
    """Sample from B-spline mixtures; row ``t`` of ``weights`` gives the mixture weights."""
    weights = np.asarray(weights, dtype=float)
    T, K = weights.shape
    cum = np.cumsum(weights, axis=1)
    comp = (rng.random(T)[:, None] > cum).sum(axis=1).clip(max=K - 1)
    lo, hi = config.domain
    x = np.linspace(lo, hi, n_grid)
    B = full_design(config, x)
    # per-basis CDF by trapezoids
    cdf = np.concatenate([np.zeros((1, K)), np.cumsum(0.5 * (B[1:] + B[:-1]) * np.diff(x)[:, None], axis=0)])
    cdf /= cdf[-1]
    u = rng.random(T)
    out = np.empty(T)
    for k in np.unique(comp):
        sel = comp == k
        c = cdf[:, k]
        keep = np.concatenate([[True], np.diff(c) > 0])
        out[sel] = np.interp(u[sel], c[keep], x[keep])
    return out


@njit(cache=True)
def _simulate_chain(cum, u, s0):
    T = u.size
    hom = cum.shape[0] == 1
    N = cum.shape[1]
    s = np.empty(T, dtype=np.int64)
    s[0] = s0
    for t in range(1, T):
        row = cum[0, s[t - 1]] if hom else cum[t, s[t - 1]]
        k = 0
        while k < N - 1 and u[t] > row[k]:
            k += 1
        s[t] = k
    return s


@dataclass
class SimScenario:
    """A generator plus series length, replicate count and seed.

    ``covariate_law="uniform01"`` draws each covariate i.i.d. uniform on
    (0, 1); ``"supplied"`` uses ``covariates`` verbatim.
    """

    generator: Generator
    T: int
    n_reps: int = 1
    seed: int = 0
    covariate_law: str = "uniform01"
    covariates: dict | None = None
    label: str | None = None

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError("T must be at least 2")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be at least 1")
        if self.covariate_law not in ("uniform01", "supplied"):
            raise ConfigError(f"unknown covariate law {self.covariate_law!r}")
        if self.covariate_law == "supplied" and self.covariates is None:
            raise ConfigError("covariate_law='supplied' needs covariates")
        if self.label is None:
            self.label = f"T={self.T}"


def simulate(scenario: SimScenario, rep_index: int = 0) -> Dataset:
    """Draw one dataset; identical ``(seed, rep_index)`` give identical data."""
    gen = scenario.generator
    T = scenario.T
    if scenario.covariate_law == "supplied":
        covs = {k: np.asarray(v, dtype=float)[:T] for k, v in scenario.covariates.items()}
    else:
        rng_c = rng_for(scenario.seed, rep_index, STREAM_COVARIATES)
        covs = {name: rng_c.random(T) for name in gen.covariate_names}
    G = np.asarray(gen.tpm(covs), dtype=float)
    if G.ndim == 2:
        G = G[None]
    delta = gen.initial(covs)
    rng_s = rng_for(scenario.seed, rep_index, STREAM_STATES)
    u = rng_s.random(T)
    s0 = int(min(np.searchsorted(np.cumsum(delta), u[0], side="left"), gen.n_states - 1))
    states = _simulate_chain(np.ascontiguousarray(np.cumsum(G, axis=-1)), u, s0)
    obs = gen.emit(rng_for(scenario.seed, rep_index, STREAM_EMISSIONS), states, covs)
    columns = {"time": np.arange(1, T + 1, dtype=float), **obs, **covs}
    return Dataset(columns, states=states)


# ------------------------------------------------------------------ study


@dataclass
class StudyFitConfig:
    """How each replicate is fitted: transition smooths of every covariate on every off-diagonal entry."""

    n_basis: int = 15
    lambda0: float = 1000.0
    tol: float = 1e-5
    max_outer: int = 60
    grid_size: int = 200
    domain: tuple[float, float] = (0.0, 1.0)

    def model_spec(self, generator: Generator) -> ModelSpec:
        N = generator.n_states
        smooths = [TransitionSmooth(i, j, SmoothSpec(cov, n_basis=self.n_basis, domain=self.domain,
                                                     lambda0=self.lambda0))
                   for i in range(N) for j in range(N) if i != j
                   for cov in generator.covariate_names]
        return ModelSpec(N, generator.stream_specs(), smooths)


def _run_replicate(task):
    scenario, fit_config, rep = task
    t0 = time.perf_counter()
    row = {"scenario": scenario.label, "T": scenario.T, "rep": rep}
    trace, curves = None, []
    try:
        data = simulate(scenario, rep)
        model = Model(fit_config.model_spec(scenario.generator), data)
        res = qreml_fit(model, QremlConfig(tol=fit_config.tol, max_outer=fit_config.max_outer))
        grid = np.linspace(*fit_config.domain, fit_config.grid_size)
        est = model.curves(res.fit.theta_hat, {c: grid for c in scenario.generator.covariate_names})
        truth = _truth_curves(scenario.generator, grid)
        row.update(converged=res.converged, n_outer=res.n_outer, loglik=res.loglik,
                   total_df=res.total_df, error="")
        for k, block in enumerate(model.blocks):
            row[f"lambda.{block.name}"] = float(res.lam[k])
            row[f"edf.{block.name}"] = float(res.edf[k])
            b = res.fit.theta_hat[res.fit.layout.block_slices[k]]
            row[f"roughness.{block.name}"] = roughness(b, model.terms[k])
        for name in sorted(truth):
            row[f"rmse.{name}"] = float(np.sqrt(np.mean((est[name] - truth[name]) ** 2)))
            curves.extend((name, rep, float(z), float(tv), float(ev))
                          for z, tv, ev in zip(grid, truth[name], est[name]))
        trace = res.lambda_trace
    except Exception as exc:  # a failed replicate must not abort the study
        row.update(converged=False, n_outer=np.nan, error=f"{type(exc).__name__}: {exc}")
    return row, trace, curves, time.perf_counter() - t0


def _truth_curves(generator, grid):
    if hasattr(generator, "truth"):
        return generator.truth(grid)
    out = {}
    for cov in generator.covariate_names:
        G = np.asarray(generator.tpm({cov: grid}))
        N = generator.n_states
        for i in range(N):
            for j in range(N):
                if i != j:
                    out[f"gamma[{i + 1},{j + 1}]|{cov}"] = G[:, i, j]
    return out


@dataclass
class StudyReport:
    rows: list[dict]
    traces: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)
    runtimes: list = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        labels = list(dict.fromkeys(r["scenario"] for r in self.rows))
        for label in labels:
            rows = [r for r in self.rows if r["scenario"] == label]
            ok = [r for r in rows if not r.get("error")]
            n_outer = np.array([r["n_outer"] for r in ok], dtype=float)
            conv = np.array([bool(r["converged"]) for r in rows])
            s = {"scenario": label, "T": rows[0]["T"], "n_reps": len(rows),
                 "failure_rate": 1.0 - len(ok) / len(rows),
                 "converged_rate": float(conv.mean())}
            if ok:
                q = np.quantile(n_outer, [0.25, 0.5, 0.75])
                s.update(n_outer_q25=float(q[0]), n_outer_median=float(q[1]), n_outer_q75=float(q[2]))
                for key in sorted(k for k in ok[0] if k.startswith(("rmse.", "lambda."))):
                    vals = np.array([r[key] for r in ok], dtype=float)
                    s[f"median.{key}"] = float(np.median(vals))
                    if key.startswith("rmse."):
                        q1, q3 = np.quantile(vals, [0.25, 0.75])
                        s[f"iqr.{key}"] = float(q3 - q1)
            out.append(s)
        return out

    def write(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "replicates": out_dir / "replicates.csv",
            "summary_csv": out_dir / "summary.csv",
            "summary_json": out_dir / "summary.json",
            "lambda_trace": out_dir / "lambda_trace.csv",
            "curves": out_dir / "curves.csv",
        }
        _write_rows(paths["replicates"], self.rows)
        summary = self.summary()
        _write_rows(paths["summary_csv"], summary)
        trace_rows = []
        for (label, rep), tr in self.traces.items():
            for it, lam in enumerate(tr):
                trace_rows.append({"scenario": label, "rep": rep, "iteration": it,
                                   **{f"lambda{k + 1}": float(v) for k, v in enumerate(lam)}})
        _write_rows(paths["lambda_trace"], trace_rows)
        _write_rows(paths["curves"], [
            {"scenario": label, "curve": c[0], "rep": c[1], "z": c[2], "truth": c[3], "estimate": c[4]}
            for label, cs in self.curves for c in cs])
        with open(paths["summary_json"], "w") as fh:
            json.dump({"schema": "smoothhmm.study/1", "summary": summary,
                       "runtime_seconds": {"total": float(sum(self.runtimes)),
                                           "mean_per_fit": float(np.mean(self.runtimes))
                                           if self.runtimes else 0.0}},
                      fh, indent=2)
        return paths


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "NA" if not np.isfinite(v) else repr(float(v))
    return str(v)


def _write_rows(path, rows):
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def run_study(scenarios, fit_config: StudyFitConfig | None = None, jobs: int = 1) -> StudyReport:
    """Fit every replicate of every scenario; replicate failures are recorded, not raised."""
    fit_config = fit_config or StudyFitConfig()
    tasks = [(sc, fit_config, rep) for sc in scenarios for rep in range(sc.n_reps)]
    if not tasks:
        raise ConfigError("study has no replicates")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_replicate, tasks))
    else:
        results = [_run_replicate(t) for t in tasks]
    report = StudyReport(rows=[])
    curves_by_label: dict[str, list] = {}
    for (sc, _, rep), (row, trace, curves, runtime) in zip(tasks, results):
        report.rows.append(row)
        if trace is not None:
            report.traces[(sc.label, rep)] = trace
        curves_by_label.setdefault(sc.label, []).extend(curves)
        report.runtimes.append(runtime)
    report.curves = list(curves_by_label.items())
    return report


def benchmark_scenarios(T_values=(1000, 5000), n_reps: int = 50, seed: int = 1) -> list[SimScenario]:
    return [SimScenario(BenchmarkGenerator(), T, n_reps, seed + k, label=f"T={T}")
            for k, T in enumerate(T_values)]
