import numpy as np
import pytest

from smoothhmm.model import (Dataset, EmissionSmooth, Model, ModelSpec, SmoothSpec, StreamSpec,
                             TransitionSmooth)
from smoothhmm.sim import BenchmarkGenerator, ParametricGenerator, SimScenario, simulate


def benchmark_data(T, seed=0, rep=0):
    return simulate(SimScenario(BenchmarkGenerator(), T, 1, seed), rep)


def benchmark_model(T=300, seed=0, n_basis=15, lambda0=1000.0):
    data = benchmark_data(T, seed)
    spec = ModelSpec(2, [StreamSpec("x", "gaussian")],
                     [TransitionSmooth(0, 1, SmoothSpec("z", n_basis, domain=(0, 1), lambda0=lambda0)),
                      TransitionSmooth(1, 0, SmoothSpec("z", n_basis, domain=(0, 1), lambda0=lambda0))])
    return Model(spec, data)


def family_models(T=100, seed=3):
    """One small model per emission family: gaussian GAMLSS, gamma, von Mises, spline density."""
    rng = np.random.default_rng(seed)
    z = rng.random(T)
    states = (rng.random(T) < 0.5).astype(int)
    models = {}

    x = np.where(states == 0, np.sin(2 * np.pi * z), 4 + z) + rng.normal(0, 0.5, T)
    spec = ModelSpec(2, [StreamSpec("x", "gaussian", [
        EmissionSmooth("mean", 0, SmoothSpec("z", 8)),
        EmissionSmooth("sd", 1, SmoothSpec("z", 6, penalty="derivative"))])],
        [TransitionSmooth(0, 1, SmoothSpec("z", 6))])
    models["gaussian"] = Model(spec, Dataset({"x": x, "z": z}))

    step = rng.gamma(2.0, np.where(states == 0, 0.5, 3.0))
    angle = rng.vonmises(np.where(states == 0, 0.0, np.pi / 2), np.where(states == 0, 0.5, 4.0))
    tod = rng.random(T) * 24
    spec = ModelSpec(2, [StreamSpec("step", "gamma"), StreamSpec("angle", "vonmises")],
                     [TransitionSmooth(0, 1, SmoothSpec("tod", 6, cyclic=True, domain=(0, 24))),
                      TransitionSmooth(1, 0, SmoothSpec("tod", 6, cyclic=True, domain=(0, 24)))],
                     initial="estimated")
    models["gamma_vonmises"] = Model(spec, Dataset({"step": step, "angle": angle, "tod": tod}))

    # persistent states keep the two flexible densities identifiable
    sticky = np.empty(T, dtype=int)
    sticky[0] = 0
    for t in range(1, T):
        sticky[t] = sticky[t - 1] if rng.random() < 0.9 else 1 - sticky[t - 1]
    y = np.where(sticky == 0, rng.normal(-1, 0.4, T), rng.gamma(3, 0.5, T))
    y[rng.random(T) < 0.05] = np.nan
    spec = ModelSpec(2, [StreamSpec("y", "spline", n_basis=10, domain=(-3.0, 6.0))])
    models["spline"] = Model(spec, Dataset({"y": np.clip(y, -3, 6)}))
    return models


def perturbed_theta(model, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return model.initial_theta() + scale * rng.standard_normal(model.layout.size)


@pytest.fixture(scope="session")
def small_benchmark_model():
    return benchmark_model(T=300, seed=11)


@pytest.fixture(scope="session")
def models_by_family():
    return family_models()


@pytest.fixture
def two_state_gaussian():
    gen = ParametricGenerator([[0.95, 0.05], [0.1, 0.9]],
                              [("x", "gaussian", {"mean": [1.0, 5.0], "sd": [1.0, 3.0]})])
    return gen
