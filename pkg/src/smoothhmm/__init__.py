"""Penalized-spline hidden Markov models with quasi-REML smoothness selection."""
from __future__ import annotations

__version__ = "0.1.0"

from .basis import (BasisConfig, SmoothTerm, bspline_design, cyclic_penalty, derivative_penalty,
                    difference_penalty, make_term, penalty_eigen)
from .emission import SplineDensity, get_family, log_density, softmax_weights, spline_density_eval
from .errors import (ConfigError, DomainError, ModelError, NumericalError, OptimizerError,
                     SmoothHMMError)
from .hmm import (forward_backward, forward_loglik, periodic_stationary, state_probs, stationary,
                  tpm_multinomial, viterbi)
from .model import (Dataset, EmissionSmooth, Model, ModelSpec, SmoothSpec, StreamSpec,
                    TransitionSmooth)
from .optimize import PenalizedFit, fit_penalized, gradient, penalized_nll
from .params import ParamLayout, ParamVector
from .qreml import QremlConfig, QremlResult, conditional_uncertainty, qreml_fit, roughness
from .sim import (BenchmarkGenerator, FittedGenerator, ParametricGenerator, SimScenario,
                  StudyFitConfig, StudyReport, run_study, simulate)

__all__ = [
    "BenchmarkGenerator", "BasisConfig", "ConfigError", "Dataset", "DomainError", "EmissionSmooth",
    "FittedGenerator", "Model", "ModelError", "ModelSpec", "NumericalError", "OptimizerError",
    "ParamLayout", "ParamVector", "ParametricGenerator", "PenalizedFit", "QremlConfig",
    "QremlResult", "SimScenario", "SmoothHMMError", "SmoothSpec", "SmoothTerm", "SplineDensity",
    "StreamSpec", "StudyFitConfig", "StudyReport", "TransitionSmooth", "bspline_design",
    "conditional_uncertainty", "cyclic_penalty", "derivative_penalty", "difference_penalty",
    "fit_penalized", "forward_backward", "forward_loglik", "get_family", "gradient", "log_density",
    "make_term", "penalized_nll", "penalty_eigen", "periodic_stationary", "qreml_fit", "roughness", "run_study",
    "simulate", "softmax_weights", "spline_density_eval", "state_probs", "stationary",
    "tpm_multinomial", "viterbi",
]
