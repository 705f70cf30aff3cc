"""Command-line front end.

Subcommands ``simulate``, ``fit``, ``decode`` and ``study``. Artifact paths
are printed to stdout, one per line. Exit status: 0 success, 2 input error,
3 non-convergence (artifacts are still written), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, NumericalError, SmoothHMMError
from .io import (InputError, read_csv, read_json, resolved_spec, spec_from_dict, spec_to_dict,
                 validate, write_csv, write_json)
from .model import Dataset, Model
from .qreml import QremlConfig, conditional_uncertainty, qreml_fit
from .sim import (BenchmarkGenerator, FittedGenerator, ParametricGenerator, SimScenario, StudyFitConfig,
                  run_study, simulate)

log = logging.getLogger("smoothhmm")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4
OUTPUT_DIR_ENV = "SMOOTHHMM_OUTPUT_DIR"
FULL_STUDY_REPS = 200
_FILL = {"gaussian": 0.0, "gamma": 1.0, "vonmises": 0.0}


def output_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUTPUT_DIR_ENV) or ".")


def parse_lambda0(text: str) -> np.ndarray:
    try:
        lam = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise InputError(f"--lambda0 expects comma-separated numbers, got {text!r}") from None
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise InputError("--lambda0 values must be positive")
    return lam


# ------------------------------------------------------------------ fitted models


def model_from_report(report: dict, data: Dataset | None = None, source: str = "<report>") -> Model:
    """Rebuild a fitted :class:`Model` from a fit report.

    Without ``data``, a two-row placeholder dataset is used; this is enough
    for simulation because every domain and centering is stored in the report.
    """
    validate(report, "fit_report", source)
    spec, _ = spec_from_dict(report["model"], source)
    if data is None:
        cols = {}
        for sm in spec._all_smooths():
            lo, hi = sm.domain
            cols[sm.covariate] = np.full(2, 0.5 * (lo + hi))
        for st in spec.streams:
            cols[st.column] = np.full(2, st.domain[0] if st.family == "spline" else _FILL[st.family])
        data = Dataset(cols)
    model = Model(spec, data, centering=report["centering"])
    if len(report["theta_hat"]) != model.layout.size:
        raise InputError(f"{source}: theta_hat has {len(report['theta_hat'])} entries, "
                         f"model expects {model.layout.size}")
    return model


def build_generator(doc: dict, base: Path):
    kind = doc["type"]
    if kind == "benchmark":
        return BenchmarkGenerator()
    if kind == "parametric":
        tpm = np.asarray(doc["tpm"], dtype=float)
        N = tpm.shape[0]
        if tpm.shape != (N, N) or not np.allclose(tpm.sum(axis=1), 1.0, atol=1e-9):
            raise InputError("generator.tpm must be square with rows summing to 1")
        streams = [(s["column"], s["family"], s["params"]) for s in doc["streams"]]
        for col, _, params in streams:
            for name, v in params.items():
                if len(v) != N:
                    raise InputError(f"generator stream {col!r} parameter {name!r} needs {N} values")
        init = doc.get("initial")
        if init is not None and (len(init) != N or not np.isclose(sum(init), 1.0)):
            raise InputError(f"generator.initial must have {N} entries summing to 1")
        try:
            return ParametricGenerator(tpm, streams, init)
        except ConfigError as exc:
            raise InputError(str(exc)) from None
    path = Path(doc["path"])
    if not path.is_absolute():
        path = base / path
    report = read_json(path, "fit_report")
    model = model_from_report(report, source=str(path))
    return FittedGenerator(model, np.asarray(report["theta_hat"], dtype=float))


def dataset_columns(data: Dataset) -> dict:
    cols = dict(data.columns)
    if data.states is not None:
        cols["true_state"] = np.asarray(data.states) + 1
    return cols


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    doc = read_json(args.scenario, "scenario")
    gen = build_generator(doc["generator"], Path(args.scenario).parent)
    law = doc.get("covariate_law", "uniform01")
    covs = doc.get("covariates")
    if law == "supplied":
        if covs is None:
            raise InputError("covariate_law 'supplied' needs a 'covariates' object")
        missing = [c for c in gen.covariate_names if c not in covs]
        if missing:
            raise InputError(f"supplied covariates lack {missing}")
        if any(len(v) < doc["T"] for v in covs.values()):
            raise InputError("supplied covariates are shorter than T")
    scenario = SimScenario(gen, doc["T"], 1, doc.get("seed", 0), law, covs)
    data = simulate(scenario, args.rep if args.rep is not None else doc.get("rep_index", 0))
    out = Path(args.out) if args.out else output_dir(None) / "simulated.csv"
    print(write_csv(out, dataset_columns(data)))
    return EXIT_OK


def _qreml_config(overrides: dict, args, p: int) -> QremlConfig:
    kw = dict(overrides)
    if args.lambda0 is not None:
        kw["lambda0"] = parse_lambda0(args.lambda0)
    if args.tol is not None:
        kw["tol"] = args.tol
    if args.max_outer is not None:
        kw["max_outer"] = args.max_outer
    if "lambda0" in kw:
        lam = np.atleast_1d(np.asarray(kw["lambda0"], dtype=float))
        if lam.size == 1:
            lam = np.full(p, lam[0])
        if lam.size != p:
            raise InputError(f"lambda0 has {lam.size} values but the model has {p} smooths")
        kw["lambda0"] = lam
    try:
        return QremlConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _parameter_table(model, fit, draws):
    names = model.layout.names()
    theta = fit.theta_hat
    try:
        cov = np.linalg.inv(fit.J_p)
        wse = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        wse = np.full(theta.size, np.nan)
    est = model.natural_params(theta)
    if draws.shape[0] > 1:
        samples = [model.natural_params(d) for d in draws]
        nse = {k: float(np.std([s[k] for s in samples], ddof=1)) for k in est}
    else:
        nse = {k: np.nan for k in est}
    rows = []
    index = {n: k for k, n in enumerate(names)}
    for name, value in est.items():
        k = index[name]
        rows.append({"name": name, "estimate": value, "se": nse[name],
                     "working_estimate": float(theta[k]), "working_se": float(wse[k])})
    return rows


def cmd_fit(args) -> int:
    data = read_csv(args.data)
    doc = read_json(args.model, "model")
    spec, overrides = spec_from_dict(doc, str(args.model))
    try:
        model = Model(spec, data)
    except ConfigError as exc:
        raise InputError(f"{args.data}: {exc}") from None
    config = _qreml_config(overrides, args, len(model.blocks))
    result = qreml_fit(model, config)
    fit = result.fit

    t0 = time.perf_counter()
    grids = model.curve_grid(args.grid_size)
    draws, bands, ridged = conditional_uncertainty(fit, args.n_draws, seed=args.seed, model=model,
                                                   grids=grids, level=0.95)
    params = _parameter_table(model, fit, draws)
    states = model.decode(fit.theta_hat) + 1
    probs = model.state_probs(fit.theta_hat)
    runtime = result.runtime + (time.perf_counter() - t0)

    out = output_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    qreml_doc = {"tol": config.tol, "max_outer": config.max_outer,
                 "inner_method": config.inner_method, "inner_max_iter": config.inner_max_iter,
                 "inner_gtol": config.inner_gtol}
    report = {
        "schema": "smoothhmm.fit_report/1",
        "converged": result.converged,
        "n_outer": result.n_outer,
        "lambda": result.lam,
        "lambda_trace": result.lambda_trace,
        "smooths": [{"name": b.name, "lambda": float(result.lam[k]), "edf": float(result.edf[k]),
                     "K": b.term.K, "m": b.term.m} for k, b in enumerate(model.blocks)],
        "edf": result.edf,
        "total_df": result.total_df,
        "loglik": fit.loglik,
        "pen_loglik": fit.pen_loglik,
        "caic": result.caic,
        "cbic": result.cbic,
        "marginal_loglik": result.marginal_loglik,
        "parameters": params,
        "diagnostics": {
            "lambda_update": result.diagnostics,
            "inner_iterations": result.inner_iters,
            "inner_converged": fit.converged,
            "inner_message": fit.message,
            "grad_norm": fit.grad_norm,
            "hessian_ridged": ridged,
            "n_draws": args.n_draws,
        },
        "runtime_seconds": runtime,
        "model": spec_to_dict(resolved_spec(model), qreml_doc),
        "theta_names": model.layout.names(),
        "theta_hat": fit.theta_hat,
        "centering": model.centering(),
        "data": {"path": str(args.data), "T": model.T},
        "decoded_states": states,
    }
    paths = [write_json(out / "fit_report.json", report)]
    cols = {"time": data.columns.get("time", np.arange(1, model.T + 1, dtype=float)), "state": states}
    cols.update({f"p{i + 1}": probs[:, i] for i in range(model.N)})
    paths.append(write_csv(out / "states.csv", cols))
    if bands:
        rows = {"curve": [], "x": [], "lower": [], "estimate": [], "upper": []}
        for name, (lo, est, hi) in bands.items():
            key = name.split("|")[-1] if "|" in name else name.split(":")[-1].split("[")[0]
            rows["curve"] += [name] * est.size
            rows["x"] += list(grids[key])
            rows["lower"] += list(lo)
            rows["estimate"] += list(est)
            rows["upper"] += list(hi)
        paths.append(write_csv(out / "curves.csv", {k: np.array(v, dtype=object) for k, v in rows.items()}))
    if args.plots:
        from .plots import plot_curves, plot_lambda_trace, plot_series

        if bands:
            paths.append(plot_curves(bands, grids, out / "curves.svg"))
        if model.blocks:
            paths.append(plot_lambda_trace(result.lambda_trace, [b.name for b in model.blocks],
                                           out / "lambda_trace.svg"))
        col = spec.streams[0].column
        paths.append(plot_series(data[col], states, out / "series.svg", label=col))
    for p in paths:
        print(p)
    if not result.converged:
        print(f"qREML did not converge within {config.max_outer} outer iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_decode(args) -> int:
    report = read_json(args.fitted, "fit_report")
    data = read_csv(args.data)
    try:
        model = model_from_report(report, data, str(args.fitted))
    except (ConfigError, ValueError) as exc:
        raise InputError(f"{args.data} does not match {args.fitted}: {exc}") from None
    theta = np.asarray(report["theta_hat"], dtype=float)
    states = model.decode(theta) + 1
    probs = model.state_probs(theta)
    cols = {"time": data.columns.get("time", np.arange(1, model.T + 1, dtype=float)), "state": states}
    cols.update({f"p{i + 1}": probs[:, i] for i in range(model.N)})
    out = Path(args.out) if args.out else output_dir(None) / "decoded.csv"
    print(write_csv(out, cols))
    return EXIT_OK


def cmd_study(args) -> int:
    doc = read_json(args.study, "study")
    n_reps = FULL_STUDY_REPS if args.full else doc.get("n_reps", 50)
    if n_reps < 1:
        raise InputError(f"{args.study}: n_reps must be at least 1")
    seed = doc.get("seed", 1)
    fit = StudyFitConfig(**doc.get("fit", {}))
    scenarios = [SimScenario(BenchmarkGenerator(), T, n_reps, seed + k, label=f"T={T}")
                 for k, T in enumerate(doc["T"])]
    report = run_study(scenarios, fit, jobs=args.jobs)
    for p in report.write(output_dir(args.out_dir)).values():
        print(p)
    if args.plots:
        from .plots import plot_lambda_trace

        out = output_dir(args.out_dir)
        for (label, rep), tr in list(report.traces.items())[:1]:
            print(plot_lambda_trace(tr, [f"lambda{k + 1}" for k in range(tr.shape[1])],
                                    out / "lambda_trace.svg"))
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="smoothhmm",
        description="Penalized-spline hidden Markov models with quasi-REML smoothness selection.",
        epilog=f"Output directories default to ${OUTPUT_DIR_ENV} or the working directory. "
               "Exit status: 0 ok, 2 input error, 3 not converged, 4 numerical failure.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dataset from a scenario JSON")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--out", help="output CSV path (default: <output dir>/simulated.csv)")
    p.add_argument("--rep", type=int, help="replicate index (overrides rep_index in the file)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model spec to a CSV time series")
    p.add_argument("data", help="CSV with a header row; NA marks missing values")
    p.add_argument("model", help="model spec JSON")
    p.add_argument("--out-dir", help="directory for the report and companion files")
    p.add_argument("--lambda0", help="initial smoothing strengths, comma-separated (one value broadcasts)")
    p.add_argument("--tol", type=float, help="relative-change tolerance on the smoothing strengths")
    p.add_argument("--max-outer", type=int, help="cap on outer iterations")
    p.add_argument("--n-draws", type=int, default=1000,
                   help="draws from the conditional sampling distribution for bands and SEs")
    p.add_argument("--grid-size", type=int, default=200, help="points per curve grid")
    p.add_argument("--seed", type=int, default=0, help="seed for the uncertainty draws")
    p.add_argument("--plots", action="store_true", help="also write SVG figures")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decode", help="Viterbi path and state probabilities under a fitted model")
    p.add_argument("data", help="CSV with the columns the model uses")
    p.add_argument("fitted", help="fit_report.json written by 'fit'")
    p.add_argument("--out", help="output CSV path (default: <output dir>/decoded.csv)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("study", help="replicated simulation study of smoothness selection")
    p.add_argument("study", help="study JSON file")
    p.add_argument("--out-dir", help="directory for study tables")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for replicates")
    p.add_argument("--full", action="store_true", help=f"use {FULL_STUDY_REPS} replicates per scenario")
    p.add_argument("--plots", action="store_true", help="also write an SVG of one smoothing-strength trace")
    p.set_defaults(func=cmd_study)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except NumericalError as exc:
        stage = f" [{exc.stage}]" if getattr(exc, "stage", None) else ""
        print(f"numerical failure{stage}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SmoothHMMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
