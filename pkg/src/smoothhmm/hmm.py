"""Forward algorithm, decoding and stationary distributions.

Transition matrices are stacked as ``gammas[t]`` = the matrix used for the
step *into* time ``t``; ``gammas[0]`` is never used for a transition. A
homogeneous chain is passed as a single ``(N, N)`` matrix.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .errors import ModelError, NumericalError


@njit(cache=True)
def _forward_backward(logp, gammas, delta, need_backward):
    T, N = logp.shape
    hom = gammas.shape[0] == 1
    alpha = np.empty((T, N))
    scale = np.empty(T)
    p = np.empty((T, N))
    ll = 0.0
    for t in range(T):
        m = logp[t, 0]
        for i in range(1, N):
            if logp[t, i] > m:
                m = logp[t, i]
        if not np.isfinite(m):
            return -np.inf, t, alpha, alpha, scale
        for i in range(N):
            p[t, i] = np.exp(logp[t, i] - m)
        c = 0.0
        if t == 0:
            for i in range(N):
                alpha[0, i] = delta[i] * p[0, i]
                c += alpha[0, i]
        else:
            g = gammas[0] if hom else gammas[t]
            for j in range(N):
                s = 0.0
                for i in range(N):
                    s += alpha[t - 1, i] * g[i, j]
                alpha[t, j] = s * p[t, j]
                c += alpha[t, j]
        if not (c > 0.0) or not np.isfinite(c):
            return -np.inf, t, alpha, alpha, scale
        for i in range(N):
            alpha[t, i] /= c
        scale[t] = c
        ll += np.log(c) + m
    if not need_backward:
        return ll, -1, alpha, alpha, scale

    beta = np.empty((T, N))
    for i in range(N):
        beta[T - 1, i] = 1.0
    for t in range(T - 1, 0, -1):
        g = gammas[0] if hom else gammas[t]
        for i in range(N):
            s = 0.0
            for j in range(N):
                s += g[i, j] * p[t, j] * beta[t, j]
            beta[t - 1, i] = s / scale[t]
    return ll, -1, alpha, beta, scale


@njit(cache=True)
def _xi(alpha, beta, scale, logp, gammas, hom):
    T, N = alpha.shape
    out = np.zeros((1 if hom else T, N, N))
    for t in range(1, T):
        m = logp[t, 0]
        for i in range(1, N):
            if logp[t, i] > m:
                m = logp[t, i]
        g = gammas[0] if hom else gammas[t]
        k = 0 if hom else t
        for i in range(N):
            for j in range(N):
                out[k, i, j] += (alpha[t - 1, i] * g[i, j] * np.exp(logp[t, j] - m)
                                 * beta[t, j] / scale[t])
    return out


def _as_stack(gammas):
    g = np.asarray(gammas, dtype=float)
    if g.ndim == 2:
        g = g[None]
    return np.ascontiguousarray(g)


def _check(delta, gammas, logp):
    logp = np.ascontiguousarray(np.asarray(logp, dtype=float))
    if logp.ndim != 2:
        raise ValueError("emission log-density matrix must be T x N")
    T, N = logp.shape
    g = _as_stack(gammas)
    delta = np.ascontiguousarray(np.asarray(delta, dtype=float))
    if delta.shape != (N,) or g.shape[1:] != (N, N) or g.shape[0] not in (1, T):
        raise ValueError(
            f"dimension mismatch: delta {delta.shape}, tpm {g.shape}, emissions {logp.shape}"
        )
    return delta, g, logp


def forward_loglik(delta, gammas, logp) -> float:
    """Log-likelihood of an HMM via the scaled forward algorithm.

    Parameters
    ----------
    delta : (N,) array
        Initial distribution.
    gammas : (N, N) or (T, N, N) array
        Transition probability matrices.
    logp : (T, N) array
        State-wise log densities of the observations (0 for missing values).
    """
    delta, g, logp = _check(delta, gammas, logp)
    ll, bad, *_ = _forward_backward(logp, g, delta, False)
    if bad >= 0:
        raise NumericalError(f"forward vector vanished at t={bad}", index=int(bad), stage="forward")
    return ll


def forward_backward(delta, gammas, logp):
    """Scaled forward-backward pass.

    Returns ``(loglik, probs, xi)`` where ``probs[t, i] = P(S_t = i | x)`` and
    ``xi`` holds expected transition counts ``P(S_{t-1}=i, S_t=j | x)``;
    ``xi`` is summed over time for a homogeneous chain.
    """
    delta, g, logp = _check(delta, gammas, logp)
    ll, bad, alpha, beta, scale = _forward_backward(logp, g, delta, True)
    if bad >= 0:
        raise NumericalError(f"forward vector vanished at t={bad}", index=int(bad), stage="forward")
    probs = alpha * beta
    xi = _xi(alpha, beta, scale, logp, g, g.shape[0] == 1)
    return ll, probs, xi


def state_probs(delta, gammas, logp) -> np.ndarray:
    """Smoothing probabilities ``P(S_t = i | x_1..x_T)``."""
    return forward_backward(delta, gammas, logp)[1]


def tpm_multinomial(eta) -> np.ndarray:
    """Row-wise softmax of transition predictors (diagonal entries are ignored and set to 0).

    Accepts ``(N, N)`` or ``(T, N, N)``.
    """
    eta = np.array(eta, dtype=float)
    N = eta.shape[-1]
    idx = np.arange(N)
    eta[..., idx, idx] = 0.0
    eta -= eta.max(axis=-1, keepdims=True)
    g = np.exp(eta)
    return g / g.sum(axis=-1, keepdims=True)


@njit(cache=True)
def _viterbi(logp, loggam, logdelta):
    T, N = logp.shape
    hom = loggam.shape[0] == 1
    v = np.empty(N)
    nv = np.empty(N)
    back = np.zeros((T, N), dtype=np.int64)
    for i in range(N):
        v[i] = logdelta[i] + logp[0, i]
    for t in range(1, T):
        g = loggam[0] if hom else loggam[t]
        for j in range(N):
            best = v[0] + g[0, j]
            arg = 0
            for i in range(1, N):
                cand = v[i] + g[i, j]
                if cand > best:
                    best = cand
                    arg = i
            nv[j] = best + logp[t, j]
            back[t, j] = arg
        for j in range(N):
            v[j] = nv[j]
    path = np.empty(T, dtype=np.int64)
    best = v[0]
    arg = 0
    for i in range(1, N):
        if v[i] > best:
            best = v[i]
            arg = i
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


def viterbi(delta, gammas, logp) -> np.ndarray:
    """Most probable state path (0-based state labels).

    Computed in log space; ties go to the lower state index.
    """
    delta, g, logp = _check(delta, gammas, logp)
    with np.errstate(divide="ignore"):
        path, best = _viterbi(logp, np.log(g), np.log(delta))
    if not np.isfinite(best):
        raise NumericalError("all state paths have zero probability", stage="viterbi")
    return path


def _irreducible(gamma) -> bool:
    N = gamma.shape[0]
    A = ((gamma > 0) | np.eye(N, dtype=bool)).astype(np.int64)
    R = np.eye(N, dtype=np.int64)
    for _ in range(max(N - 1, 1)):
        R = np.minimum(R @ A, 1)
    return bool(np.all(R > 0))


def stationary(gamma) -> np.ndarray:
    """Stationary distribution ``delta Gamma = delta`` of an irreducible chain."""
    gamma = np.asarray(gamma, dtype=float)
    N = gamma.shape[0]
    if not _irreducible(gamma):
        raise ModelError("transition matrix is reducible; use a fixed (e.g. uniform) initial "
                         "distribution instead")
    A = np.vstack([gamma.T - np.eye(N), np.ones((1, N))])
    rhs = np.zeros(N + 1)
    rhs[-1] = 1.0
    delta = np.linalg.lstsq(A, rhs, rcond=None)[0]
    delta = np.clip(delta, 0.0, None)
    return delta / delta.sum()


def stationary_sensitivity(gamma, delta, g_delta) -> np.ndarray:
    """Gradient w.r.t. ``gamma`` of a scalar whose gradient w.r.t. ``delta(gamma)`` is ``g_delta``.

    Uses ``delta = 1^T (I - Gamma + 1 1^T)^{-1}``.
    """
    N = gamma.shape[0]
    A = np.eye(N) - gamma + 1.0
    return np.outer(delta, np.linalg.solve(A, g_delta))


def periodic_stationary(tpm_cycle) -> np.ndarray:
    """Periodically stationary distributions of a cyclic chain.

    ``tpm_cycle[l]`` is the matrix for the step into phase ``l``. Returns an
    ``(L, N)`` array with ``delta[l] @ tpm_cycle[(l + 1) % L] == delta[(l + 1) % L]``.
    """
    G = np.asarray(tpm_cycle, dtype=float)
    if G.ndim == 2:
        G = G[None]
    L, N, _ = G.shape
    prod = np.eye(N)
    for l in list(range(1, L)) + [0]:
        prod = prod @ G[l]
    try:
        d0 = stationary(prod)
    except ModelError:
        raise ModelError("cycle product is reducible") from None
    out = np.empty((L, N))
    out[0] = d0
    for l in range(1, L):
        out[l] = out[l - 1] @ G[l]
        out[l] /= out[l].sum()
    return out
