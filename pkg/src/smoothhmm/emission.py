"""State-dependent distributions and additive predictors.

Every parametric family is parameterized on a *working* (link) scale:

=========  ======================  =========================
family     parameters              links
=========  ======================  =========================
gaussian   mean, sd                identity, log
gamma      mean, sd                log, log
vonmises   mean, concentration     identity (wrapped), log
=========  ======================  =========================

Gamma mean/sd are converted to shape ``mean**2 / sd**2`` and scale
``sd**2 / mean`` internally.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, i0e, i1e

from .basis import BasisConfig, SmoothTerm, basis_integrals, full_design, make_term
from .errors import ConfigError, DomainError

LOG_2PI = np.log(2.0 * np.pi)

LINKS = {
    "identity": (lambda eta: eta, lambda mu: mu),
    "log": (np.exp, np.log),
    "logit": (lambda eta: 1.0 / (1.0 + np.exp(-eta)), lambda mu: np.log(mu / (1.0 - mu))),
}


def inverse_link(link: str, eta):
    return LINKS[link][0](eta)


def apply_link(link: str, mu):
    return LINKS[link][1](mu)


def log_bessel_i0(kappa):
    """``log I_0(kappa)`` via the exponentially scaled Bessel function."""
    kappa = np.asarray(kappa, dtype=float)
    return np.log(i0e(kappa)) + kappa


def bessel_ratio(kappa):
    """``I_1(kappa) / I_0(kappa)``."""
    return i1e(kappa) / i0e(kappa)


class Family:
    name: str
    params: tuple[str, ...]
    links: tuple[str, ...]

    def working(self, natural):
        return [apply_link(lk, np.asarray(v, dtype=float)) for lk, v in zip(self.links, natural)]

    def natural(self, working):
        return [inverse_link(lk, w) for lk, w in zip(self.links, working)]

    def log_density(self, x, *params):
        self.check_params(*params)
        self.check_support(x)
        lp, _ = self.logpdf_working(np.asarray(x, dtype=float), self.working(params), grad=False)
        return lp

    def check_params(self, *params):  # pragma: no cover - overridden
        pass

    def check_support(self, x):
        pass


class Gaussian(Family):
    name = "gaussian"
    params = ("mean", "sd")
    links = ("identity", "log")

    def check_params(self, mean, sd):
        if np.any(~np.isfinite(mean)) or np.any(np.asarray(sd) <= 0) or np.any(~np.isfinite(sd)):
            raise DomainError("gaussian requires finite mean and sd > 0")

    def logpdf_working(self, x, W, grad=True):
        mu, log_sd = W
        sd = np.exp(log_sd)
        z = (x - mu) / sd
        lp = -0.5 * LOG_2PI - log_sd - 0.5 * z * z
        if not grad:
            return lp, None
        return lp, [z / sd, z * z - 1.0]

    def sample(self, rng, mean, sd):
        return rng.normal(mean, sd)


class Gamma(Family):
    name = "gamma"
    params = ("mean", "sd")
    links = ("log", "log")

    def check_params(self, mean, sd):
        if np.any(np.asarray(mean) <= 0) or np.any(np.asarray(sd) <= 0):
            raise DomainError("gamma requires mean > 0 and sd > 0 (shape, scale > 0)")

    def check_support(self, x):
        if np.any(np.asarray(x) <= 0):
            raise DomainError("gamma requires x > 0")

    def logpdf_working(self, x, W, grad=True):
        log_mu, log_sd = W
        shape = np.exp(2.0 * (log_mu - log_sd))
        log_scale = 2.0 * log_sd - log_mu
        scale = np.exp(log_scale)
        logx = np.log(x)
        lp = (shape - 1.0) * logx - x / scale - shape * log_scale - gammaln(shape)
        if not grad:
            return lp, None
        d_shape = logx - log_scale - digamma(shape)
        scale_d_scale = x / scale - shape
        return lp, [2.0 * shape * d_shape - scale_d_scale,
                    -2.0 * shape * d_shape + 2.0 * scale_d_scale]

    def sample(self, rng, mean, sd):
        shape = (mean / sd) ** 2
        return rng.gamma(shape, sd**2 / mean)


class VonMises(Family):
    name = "vonmises"
    params = ("mean", "concentration")
    links = ("identity", "log")

    def check_params(self, mean, concentration):
        if np.any(np.asarray(concentration) < 0) or np.any(~np.isfinite(mean)):
            raise DomainError("von Mises requires finite location and concentration >= 0")

    def check_support(self, x):
        x = np.asarray(x)
        if np.any(x <= -np.pi - 1e-12) or np.any(x > np.pi + 1e-12):
            raise DomainError("von Mises requires x in (-pi, pi]")

    def log_density(self, x, mean, concentration):
        self.check_params(mean, concentration)
        self.check_support(x)
        kappa = np.asarray(concentration, dtype=float)
        return kappa * np.cos(np.asarray(x) - mean) - LOG_2PI - log_bessel_i0(kappa)

    def logpdf_working(self, x, W, grad=True):
        mu, log_kappa = W
        kappa = np.exp(log_kappa)
        c = np.cos(x - mu)
        lp = kappa * c - LOG_2PI - log_bessel_i0(kappa)
        if not grad:
            return lp, None
        return lp, [kappa * np.sin(x - mu), kappa * (c - bessel_ratio(kappa))]

    def sample(self, rng, mean, concentration):
        draws = rng.vonmises(mean, concentration)
        return np.where(draws <= -np.pi, draws + 2 * np.pi, draws)


FAMILIES: dict[str, Family] = {f.name: f for f in (Gaussian(), Gamma(), VonMises())}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(
            f"unknown family {name!r}; expected one of {sorted(FAMILIES) + ['spline']}"
        ) from None


@dataclass(eq=False)
class SplineDensity:
    """Mixture of standardized B-splines with multinomial-logit weights.

    ``coef`` holds the free logits; the first logit is fixed at zero.
    """

    term: SmoothTerm
    norm_consts: np.ndarray
    coef: np.ndarray

    @classmethod
    def from_config(cls, config: BasisConfig, coef=None, penalty: str = "difference"):
        if config.constraint != "drop_first_coef":
            config = BasisConfig(config.n_basis, config.degree, config.domain, config.cyclic,
                                 config.penalty_order, "drop_first_coef")
        term = make_term(config, penalty)
        coef = np.zeros(term.K) if coef is None else np.asarray(coef, dtype=float)
        if coef.shape != (term.K,):
            raise ConfigError(f"expected {term.K} coefficients, got {coef.shape}")
        return cls(term, basis_integrals(config), coef)

    @property
    def weights(self) -> np.ndarray:
        return softmax_weights(self.coef)

    def standardized_design(self, x) -> np.ndarray:
        return full_design(self.term.config, x) / self.norm_consts

    def __call__(self, x) -> np.ndarray:
        return spline_density_eval(self, x)


def softmax_weights(coef) -> np.ndarray:
    """Softmax of ``(0, coef)``; works on the last axis."""
    coef = np.asarray(coef, dtype=float)
    logits = np.concatenate([np.zeros(coef.shape[:-1] + (1,)), coef], axis=-1)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def spline_density_eval(d: SplineDensity, x) -> np.ndarray:
    """Density values ``sum_k alpha_k B_k(x) / c_k``."""
    x = np.asarray(x, dtype=float)
    if not d.term.config.cyclic:
        lo, hi = d.term.config.domain
        if np.any((x < lo) | (x > hi)):
            raise DomainError(f"spline density evaluated outside its domain [{lo}, {hi}]")
    return d.standardized_design(x.reshape(-1)) @ d.weights


def spline_logpdf_working(Bstd: np.ndarray, coef: np.ndarray, grad: bool = True):
    """Log density and its gradient w.r.t. the free logits.

    ``Bstd`` is the standardized full design (rows for observations).
    """
    alpha = softmax_weights(coef)
    f = Bstd @ alpha
    with np.errstate(divide="ignore"):
        lp = np.log(f)
    if not grad:
        return lp, None
    # d log f / d b_k = alpha_k (B_k / f - 1), k >= 1
    with np.errstate(divide="ignore", invalid="ignore"):
        dlp = alpha[1:] * (Bstd[:, 1:] / f[:, None] - 1.0)
    return lp, dlp


def log_density(family: str, x, params):
    """Log density of one family at natural-scale parameters.

    ``params`` is a tuple of natural parameters, or a :class:`SplineDensity`
    for ``family="spline"``.

    >>> round(float(log_density("gaussian", 0.0, (0.0, 1.0))), 7)
    -0.9189385
    """
    if family == "spline":
        if not isinstance(params, SplineDensity):
            raise ConfigError("spline family expects a SplineDensity")
        with np.errstate(divide="ignore"):
            return np.log(spline_density_eval(params, x))
    out = get_family(family).log_density(x, *params)
    if np.any(~np.isfinite(out)):
        raise DomainError(f"non-finite {family} log density")
    return out


@dataclass(frozen=True)
class PredictorSpec:
    """``eta = a[intercept_index] + sum_j X_j b_{block_j}`` mapped through ``link``."""

    intercept_index: int | None
    smooth_blocks: tuple[tuple[SmoothTerm, int], ...] = ()
    link: str = "identity"

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}")


def predictor_eval(spec: PredictorSpec, theta, design_rows, t=None):
    """Linear predictor on the link scale; the inverse link is applied by the caller.

    ``design_rows`` holds one design matrix per smooth block, aligned with
    ``spec.smooth_blocks``. With ``t=None`` the whole series is returned.
    """
    if len(design_rows) != len(spec.smooth_blocks):
        raise AssertionError("design matrices do not match smooth blocks")
    a = theta.a
    base = 0.0 if spec.intercept_index is None else a[spec.intercept_index]
    rows = slice(None) if t is None else t
    eta = base
    for (term, block), X in zip(spec.smooth_blocks, design_rows):
        b = theta.block(block)
        if X.shape[1] != b.size:
            raise AssertionError(f"design has {X.shape[1]} columns, block {block} has {b.size}")
        eta = eta + X[rows] @ b
    if t is None and np.ndim(eta) == 0:
        n = design_rows[0].shape[0] if design_rows else 1
        eta = np.full(n, float(eta))
    return eta
