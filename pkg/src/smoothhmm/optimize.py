"""Penalized maximum likelihood for fixed smoothing strengths."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import NumericalError, OptimizerError
from .params import ParamLayout, ParamVector

log = logging.getLogger(__name__)

BARRIER = 1e10


def penalty_value(theta, lam, layout: ParamLayout, terms) -> float:
    """``0.5 * sum_i lam_i b_i^T S_i b_i``."""
    theta = np.asarray(theta, dtype=float)
    out = 0.0
    for lam_i, sl, term in zip(lam, layout.block_slices, terms):
        b = theta[sl]
        out += 0.5 * lam_i * float(b @ term.S @ b)
    return out


def penalty_gradient(theta, lam, layout: ParamLayout, terms) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for lam_i, sl, term in zip(lam, layout.block_slices, terms):
        g[sl] = lam_i * (term.S @ theta[sl])
    return g


def penalty_matrix(lam, layout: ParamLayout, terms) -> np.ndarray:
    """Block-diagonal ``sum_i lam_i S_i`` embedded in the full parameter space."""
    P = np.zeros((layout.size, layout.size))
    for lam_i, sl, term in zip(lam, layout.block_slices, terms):
        P[sl, sl] = lam_i * term.S
    return P


class _Objective:
    """Penalized negative log-likelihood with barrier handling and a one-point cache."""

    def __init__(self, model, lam):
        self.model = model
        self.lam = np.asarray(lam, dtype=float)
        self.terms = model.terms
        self.layout = model.layout
        self.barrier_hits = 0
        self._key = None
        self._val = None

    def __call__(self, theta):
        key = theta.tobytes()
        if key == self._key:
            return self._val
        ll, g = self.model.loglik_grad(theta)
        if not np.isfinite(ll) or not np.all(np.isfinite(g)):
            self.barrier_hits += 1
            out = (BARRIER + float(theta @ theta), 2.0 * theta)
        else:
            f = -ll + penalty_value(theta, self.lam, self.layout, self.terms)
            out = (f, -g + penalty_gradient(theta, self.lam, self.layout, self.terms))
        self._key, self._val = key, out
        return out

    def value(self, theta):
        return self(np.asarray(theta, dtype=float))[0]

    def grad(self, theta):
        return self(np.asarray(theta, dtype=float))[1]


def penalized_nll(theta, lam, model) -> float:
    """Negative penalized log-likelihood; a finite barrier value replaces non-finite likelihoods."""
    return _Objective(model, lam).value(model.check_theta(theta))


def gradient(theta, lam, model) -> np.ndarray:
    """Exact gradient of :func:`penalized_nll`."""
    theta = model.check_theta(theta)
    ll, g = model.loglik_grad(theta)
    if not np.isfinite(ll):
        raise NumericalError("likelihood is not finite at theta", stage="gradient")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericalError(f"non-finite gradient component {bad[0]}", index=int(bad[0]),
                             stage="gradient")
    return -g + penalty_gradient(theta, lam, model.layout, model.terms)


def fd_gradient(fun, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences with step ``rel_step * max(1, |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (fun(theta + e) - fun(theta - e)) / (2.0 * h)
    return g


def fd_hessian(grad, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Forward differences of a gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    g0 = grad(theta)
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(theta[j]))
        e = theta.copy()
        e[j] += h
        H[:, j] = (grad(e) - g0) / h
    return 0.5 * (H + H.T)


@dataclass
class PenalizedFit:
    """Result of :func:`fit_penalized`.

    ``J_p`` is the negative Hessian of the penalized log-likelihood at the
    optimum (equivalently the Hessian of the penalized NLL).
    """

    theta: ParamVector
    lam: np.ndarray
    loglik: float
    pen_loglik: float
    J_p: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float = np.nan
    n_eval: int = 0
    message: str = ""
    trace: list = field(default_factory=list, repr=False)

    @property
    def layout(self) -> ParamLayout:
        return self.theta.layout

    @property
    def theta_hat(self) -> np.ndarray:
        return self.theta.values


def _initial_inverse_hessian(obj: _Objective, theta0):
    try:
        H = fd_hessian(obj.grad, theta0)
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def fit_penalized(model, lam, theta0=None, *, method: str = "BFGS", max_iter: int = 500,
                  gtol: float = 1e-5, hess_inv0=None, hessian: bool = True) -> PenalizedFit:
    """Minimize the penalized NLL for fixed ``lam``.

    Parameters
    ----------
    model : Model
    lam : array_like
        One smoothing strength per spline block.
    theta0 : array_like, optional
        Starting value; defaults to ``model.initial_theta()``.
    method : {"BFGS", "L-BFGS-B"}
    max_iter : int
        Iteration cap; hitting it returns a fit flagged non-converged.
    gtol : float
        Convergence when ``max|grad| < gtol * max(1, |f|)``.
    hess_inv0 : array, optional
        Starting inverse Hessian for BFGS. If omitted, the inverse of a
        finite-difference Hessian at ``theta0`` is used when positive definite.
    hessian : bool
        Compute ``J_p`` by forward differences of the gradient at the optimum.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (model.layout.p,):
        raise ValueError(f"expected {model.layout.p} smoothing strengths, got {lam.shape}")
    if np.any(lam <= 0):
        raise ValueError("smoothing strengths must be positive")
    theta0 = model.initial_theta() if theta0 is None else np.array(theta0, dtype=float)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("theta0 must be finite")
    obj = _Objective(model, lam)
    f0 = obj.value(theta0)
    if f0 >= BARRIER:
        raise OptimizerError("likelihood is not finite at the starting value; choose a new theta0",
                             stage="fit")
    scale = max(1.0, abs(f0))

    trace = [f0]
    fun = lambda th: obj(th)  # noqa: E731
    if method == "BFGS":
        if hess_inv0 is None:
            hess_inv0 = _initial_inverse_hessian(obj, theta0)
        res = minimize(fun, theta0, jac=True, method="BFGS",
                       callback=lambda th: trace.append(obj.value(th)),
                       options={"gtol": gtol * scale, "maxiter": max_iter,
                                "hess_inv0": hess_inv0, "c2": 0.9})
    elif method == "L-BFGS-B":
        res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                       callback=lambda th: trace.append(obj.value(th)),
                       options={"gtol": gtol * scale, "maxiter": max_iter, "ftol": 1e-15,
                                "maxcor": 30})
    else:
        raise ValueError(f"unknown method {method!r}")

    theta = res.x
    f, g = obj(theta)
    if f >= BARRIER:
        raise OptimizerError("optimizer is trapped at the barrier value; choose a new theta0",
                             stage="fit")
    gnorm = float(np.abs(g).max(initial=0.0))
    converged = gnorm < gtol * max(1.0, abs(f))
    if not converged:
        log.info("inner fit not converged: %s (max|grad|=%.3g)", res.message, gnorm)
    J = fd_hessian(obj.grad, theta) if hessian else np.full((theta.size, theta.size), np.nan)
    pen = penalty_value(theta, lam, model.layout, model.terms)
    return PenalizedFit(
        theta=ParamVector(theta, model.layout),
        lam=lam.copy(),
        loglik=-(f - pen),
        pen_loglik=-f,
        J_p=J,
        n_iter=int(res.nit),
        converged=bool(converged),
        grad_norm=gnorm,
        n_eval=int(res.nfev),
        message=str(res.message),
        trace=trace,
    )
