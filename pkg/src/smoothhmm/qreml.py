"""Quasi-REML smoothness selection.

The outer loop alternates a penalized fit at the current smoothing strengths
with the closed-form update

    lam_i <- (K_i - lam_i * tr((J_p^{-1})_ii S_i) - m_i) / (b_i^T S_i b_i),

treating the penalized mode as fixed in each update. Inner fits are warm
started from the previous mode, with the previous ``J_p`` (shifted by the
change in penalty) as the initial inverse-Hessian approximation.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError
from .optimize import PenalizedFit, fit_penalized, penalty_matrix

log = logging.getLogger(__name__)

LAMBDA_CLAMP = (1e-8, 1e12)
DENSE_INVERSE_MAX_DIM = 300


@dataclass
class QremlConfig:
    lambda0: np.ndarray | None = None
    tol: float = 1e-4
    max_outer: int = 100
    lambda_clamp: tuple[float, float] = LAMBDA_CLAMP
    inner_method: str = "BFGS"
    inner_max_iter: int = 500
    inner_gtol: float = 1e-5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        lo, hi = self.lambda_clamp
        if not 0 < lo < hi:
            raise ValueError("lambda_clamp must satisfy 0 < lo < hi")
        if self.lambda0 is not None:
            lam = np.atleast_1d(np.asarray(self.lambda0, dtype=float))
            if np.any(lam < lo) or np.any(lam > hi):
                raise ValueError(f"lambda0 must lie within {self.lambda_clamp}")
            self.lambda0 = lam


@dataclass
class QremlResult:
    fit: PenalizedFit
    lam: np.ndarray
    lambda_trace: np.ndarray
    edf: np.ndarray
    total_df: float
    caic: float
    cbic: float
    converged: bool
    n_outer: int
    inner_iters: list[int] = field(default_factory=list)
    diagnostics: list[list[str | None]] = field(default_factory=list)
    marginal_loglik: float = np.nan
    runtime: float = 0.0

    @property
    def loglik(self) -> float:
        return self.fit.loglik


def block_inverse_diagonals(J, slices, dense_max_dim: int = DENSE_INVERSE_MAX_DIM):
    """Diagonal blocks ``(J^{-1})_ii`` for each slice.

    Uses a dense inverse for small systems and ``K_i`` Cholesky solves per
    block otherwise.
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    try:
        if n <= dense_max_dim:
            Jinv = np.linalg.inv(J)
            if not np.all(np.isfinite(Jinv)):
                raise np.linalg.LinAlgError("non-finite inverse")
            return [Jinv[sl, sl] for sl in slices]
        c = cho_factor(J)
        out = []
        for sl in slices:
            E = np.zeros((n, sl.stop - sl.start))
            E[sl, :] = np.eye(sl.stop - sl.start)
            out.append(cho_solve(c, E)[sl, :])
        return out
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"J_p is singular: {exc}", stage="lambda_update") from None


def roughness(b, term) -> float:
    """``b^T S b`` via the eigendecomposition; non-negative and accurate near the nullspace."""
    return float(term.eigvals @ (term.U.T @ b) ** 2)


def lambda_update(lam, fit: PenalizedFit, terms, clamp=LAMBDA_CLAMP):
    """One closed-form smoothing-strength update.

    Returns ``(new_lam, diagnostics)``; diagnostics hold ``"fully smooth"``
    (zero roughness, upper clamp), ``"wiggly limit"`` (non-positive numerator,
    lower clamp) or ``None`` per smooth.
    """
    lam = np.asarray(lam, dtype=float)
    slices = fit.layout.block_slices
    blocks = block_inverse_diagonals(fit.J_p, slices)
    out = np.empty_like(lam)
    diags: list[str | None] = []
    lo, hi = clamp
    for i, (term, sl, Jinv_ii) in enumerate(zip(terms, slices, blocks)):
        b = fit.theta_hat[sl]
        rough = roughness(b, term)
        num = term.K - lam[i] * float(np.trace(Jinv_ii @ term.S)) - term.m
        if rough < 1e-12:
            out[i], tag = hi, "fully smooth"
        elif num <= 0:
            out[i], tag = lo, "wiggly limit"
        else:
            out[i], tag = num / rough, None
            if out[i] > hi:
                out[i], tag = hi, "fully smooth"
            elif out[i] < lo:
                out[i], tag = lo, "wiggly limit"
        diags.append(tag)
    return out, diags


def effective_df(fit: PenalizedFit, lam, terms):
    """Per-smooth EDF ``K_i - m_i - lam_i tr((J_p^{-1})_ii S_i)`` and total df.

    The total counts the ``d`` fixed effects and each penalty nullspace once.
    """
    lam = np.asarray(lam, dtype=float)
    slices = fit.layout.block_slices
    blocks = block_inverse_diagonals(fit.J_p, slices) if slices else []
    edf = np.array([term.K - term.m - lam[i] * float(np.trace(Jb @ term.S))
                    for i, (term, Jb) in enumerate(zip(terms, blocks))])
    total = fit.layout.d + float(np.sum(edf + np.array([t.m for t in terms], dtype=float)))
    return edf, total


def approx_marginal_loglik(fit: PenalizedFit, lam, terms) -> float:
    """Laplace-approximate restricted log-likelihood of ``lam`` (up to constants).

    ``0.5 sum (K_i - m_i) log lam_i + l_p(theta_hat) - 0.5 log det J_p``;
    the orthonormal reparameterization does not change the determinant.
    """
    lam = np.asarray(lam, dtype=float)
    sign, logdet = np.linalg.slogdet(fit.J_p)
    if sign <= 0:
        return np.nan
    ranks = np.array([t.rank for t in terms], dtype=float)
    return 0.5 * float(ranks @ np.log(lam)) + fit.pen_loglik - 0.5 * logdet


def _warm_hess_inv(fit: PenalizedFit, lam_old, lam_new, terms):
    J = fit.J_p + penalty_matrix(np.asarray(lam_new) - np.asarray(lam_old), fit.layout, terms)
    try:
        L = np.linalg.cholesky(J)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def qreml_fit(model, config: QremlConfig | None = None, theta0=None) -> QremlResult:
    """Fit ``model`` with smoothing strengths selected by quasi-REML.

    Terminates when ``max_i |lam_i' - lam_i| / lam_i < tol``; a component
    sitting on a clamp bound for two consecutive updates counts as converged.
    """
    config = config or QremlConfig()
    start = time.perf_counter()
    terms = model.terms
    p = len(terms)
    lam = model.lambda0 if config.lambda0 is None else config.lambda0
    lam = np.clip(np.broadcast_to(np.asarray(lam, dtype=float), (p,)).copy(), *config.lambda_clamp)
    theta = model.initial_theta() if theta0 is None else np.asarray(theta0, dtype=float)

    trace = [lam.copy()]
    inner_iters: list[int] = []
    diagnostics: list[list[str | None]] = []
    hess_inv = None
    converged = False
    fit_lam = lam
    prev_diag: list[str | None] = [None] * p
    k = 0
    for k in range(1, config.max_outer + 1):
        try:
            fit = fit_penalized(model, lam, theta, method=config.inner_method,
                               max_iter=config.inner_max_iter, gtol=config.inner_gtol,
                               hess_inv0=hess_inv)
        except NumericalError as exc:
            exc.args = (f"outer iteration {k}: {exc}",)
            exc.index = k
            raise
        inner_iters.append(fit.n_iter)
        fit_lam = lam
        if p == 0:
            converged = True
            break
        new, diag = lambda_update(lam, fit, terms, config.lambda_clamp)
        diagnostics.append(diag)
        rel = np.abs(new - lam) / lam
        for i in range(p):
            if diag[i] is not None and diag[i] == prev_diag[i] and new[i] == lam[i]:
                rel[i] = 0.0
        prev_diag = diag
        trace.append(new.copy())
        theta = fit.theta_hat
        hess_inv = _warm_hess_inv(fit, lam, new, terms)
        lam = new
        log.debug("outer %d: lambda=%s max rel change=%.3g", k, lam, rel.max())
        if rel.max() < config.tol:
            converged = True
            break

    edf, total = effective_df(fit, fit_lam, terms)
    T = model.T
    return QremlResult(
        fit=fit,
        lam=trace[-1].copy(),
        lambda_trace=np.array(trace).reshape(len(trace), p),
        edf=edf,
        total_df=total,
        caic=-2.0 * fit.loglik + 2.0 * total,
        cbic=-2.0 * fit.loglik + np.log(T) * total,
        converged=converged,
        n_outer=k,
        inner_iters=inner_iters,
        diagnostics=diagnostics,
        marginal_loglik=approx_marginal_loglik(fit, fit_lam, terms),
        runtime=time.perf_counter() - start,
    )


def _chol_with_ridge(J):
    J = 0.5 * (J + J.T)
    try:
        return np.linalg.cholesky(J), False
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * np.trace(J) / J.shape[0]
    try:
        return np.linalg.cholesky(J + ridge * np.eye(J.shape[0])), True
    except np.linalg.LinAlgError:
        raise NumericalError("J_p is indefinite beyond ridge repair",
                             stage="uncertainty") from None


def conditional_uncertainty(fit: PenalizedFit, n_draws: int, seed=None, model=None, grids=None,
                            level: float = 0.95):
    """Gaussian draws of ``theta`` given the selected smoothing strengths.

    Draws come from ``N(theta_hat, J_p^{-1})``. With ``model`` given, each
    draw is mapped through :meth:`Model.curves` and pointwise quantile bands
    are returned as ``{name: (lower, estimate, upper)}``.

    Returns ``(draws, bands, ridged)``.
    """
    theta = fit.theta_hat
    L, ridged = _chol_with_ridge(fit.J_p)
    if ridged:
        log.warning("J_p not positive definite; added a small ridge before sampling")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, theta.size))
    # J = L L^T  =>  cov = L^{-T} L^{-1}
    draws = theta + np.linalg.solve(L.T, z.T).T if n_draws else np.empty((0, theta.size))
    bands = {}
    if model is not None:
        grids = grids or model.curve_grid()
        point = model.curves(theta, grids)
        if n_draws:
            samples = {k: np.empty((n_draws, v.size)) for k, v in point.items()}
            for r in range(n_draws):
                for k, v in model.curves(draws[r], grids).items():
                    samples[k][r] = v
            a = (1 - level) / 2
            for k, v in point.items():
                lo, hi = np.quantile(samples[k], [a, 1 - a], axis=0)
                bands[k] = (lo, v, hi)
        else:
            bands = {k: (v.copy(), v, v.copy()) for k, v in point.items()}
    return draws, bands, ridged
