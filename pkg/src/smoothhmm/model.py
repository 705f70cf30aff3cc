"""Model specification and assembly.

A :class:`ModelSpec` describes *what* to fit: the number of states, one or
more observation streams with their emission families, smooth terms attached
to emission parameters or transition entries, and the initial-distribution
policy. :class:`Model` compiles a spec against a :class:`Dataset` into design
matrices and a parameter layout, and evaluates the log-likelihood together
with its exact gradient (forward-backward posteriors chained through the
links).

States are 0-based in the Python API.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisConfig, SmoothTerm, basis_integrals, full_design, make_term
from .emission import apply_link, get_family, inverse_link, softmax_weights, spline_logpdf_working
from .errors import ConfigError, DomainError, ModelError, NumericalError
from .hmm import forward_backward, forward_loglik, stationary, stationary_sensitivity, tpm_multinomial, viterbi
from .params import ParamLayout, ParamVector

DEFAULT_LAMBDA0 = {"tpm": 1e3, "emission": 1e5, "density": 30.0}
INITIAL_POLICIES = ("stationary", "uniform", "estimated")


@dataclass(frozen=True)
class SmoothSpec:
    """A penalized smooth of one covariate.

    ``domain=None`` takes the observed covariate range at build time.
    """

    covariate: str
    n_basis: int = 12
    degree: int = 3
    cyclic: bool = False
    penalty: str = "difference"
    penalty_order: int = 2
    domain: tuple[float, float] | None = None
    lambda0: float | None = None


@dataclass(frozen=True)
class EmissionSmooth:
    parameter: str
    state: int
    smooth: SmoothSpec


@dataclass(frozen=True)
class TransitionSmooth:
    i: int
    j: int
    smooth: SmoothSpec


@dataclass
class StreamSpec:
    """One observed column and its state-dependent family.

    For ``family="spline"`` the density basis is described by ``n_basis``,
    ``degree``, ``domain``, ``penalty`` and ``penalty_order``.
    """

    column: str
    family: str
    smooths: list[EmissionSmooth] = field(default_factory=list)
    n_basis: int = 25
    degree: int = 3
    domain: tuple[float, float] | None = None
    penalty: str = "difference"
    penalty_order: int = 2
    lambda0: float | None = None
    init: dict | None = None


@dataclass
class ModelSpec:
    n_states: int
    streams: list[StreamSpec]
    tpm_smooths: list[TransitionSmooth] = field(default_factory=list)
    initial: str = "stationary"
    self_transition: float = 0.9
    tpm_init: np.ndarray | None = None

    def __post_init__(self):
        N = self.n_states
        if N < 1:
            raise ConfigError("n_states must be positive")
        if not self.streams:
            raise ConfigError("at least one observation stream is required")
        if self.initial not in INITIAL_POLICIES:
            raise ConfigError(f"initial must be one of {INITIAL_POLICIES}")
        if not 0.0 < self.self_transition < 1.0 and N > 1:
            raise ConfigError("self_transition must lie in (0, 1)")
        if self.tpm_init is not None:
            g = np.asarray(self.tpm_init, dtype=float)
            if g.shape != (N, N) or np.any(g <= 0) or not np.allclose(g.sum(axis=1), 1.0, atol=1e-8):
                raise ConfigError("tpm_init must be an N x N matrix with positive rows summing to 1")
            self.tpm_init = g
        for ts in self.tpm_smooths:
            if ts.i == ts.j or not (0 <= ts.i < N and 0 <= ts.j < N):
                raise ConfigError(f"invalid transition smooth target ({ts.i}, {ts.j})")
        for st in self.streams:
            if st.family == "spline":
                if st.smooths:
                    raise ConfigError("spline-density streams do not take predictor smooths")
                continue
            fam = get_family(st.family)
            for es in st.smooths:
                if es.parameter not in fam.params:
                    raise ConfigError(
                        f"{st.family} has no parameter {es.parameter!r}; expected {fam.params}"
                    )
                if not 0 <= es.state < N:
                    raise ConfigError(f"state {es.state} out of range for {N} states")

    @property
    def covariates(self) -> list[str]:
        out = []
        for sm in self._all_smooths():
            if sm.covariate not in out:
                out.append(sm.covariate)
        return out

    def _all_smooths(self):
        for st in self.streams:
            for es in st.smooths:
                yield es.smooth
        for ts in self.tpm_smooths:
            yield ts.smooth


@dataclass
class Dataset:
    """Named columns of equal length; ``states`` holds true states when simulated."""

    columns: dict[str, np.ndarray]
    states: np.ndarray | None = None

    def __post_init__(self):
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        lengths = {v.shape for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns have different lengths: {lengths}")

    @property
    def T(self) -> int:
        return len(next(iter(self.columns.values())))

    def __getitem__(self, name):
        return self.columns[name]


@dataclass
class Block:
    name: str
    term: SmoothTerm
    lambda0: float
    kind: str
    covariate: str | None


@dataclass
class _Predictor:
    intercept: int
    blocks: list[int]


@dataclass
class _Stream:
    spec: StreamSpec
    x: np.ndarray
    missing: np.ndarray
    family: object = None
    preds: list[list[_Predictor]] | None = None
    Bstd: np.ndarray | None = None
    blocks: list[int] | None = None
    basis: BasisConfig | None = None
    norm_consts: np.ndarray | None = None


def _resolve_domain(values, domain):
    if domain is not None:
        return tuple(float(v) for v in domain)
    v = values[np.isfinite(values)]
    if v.size == 0:
        raise DomainError("cannot infer a domain from an all-missing column")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        hi = lo + 1.0
    return lo, hi


def greville(config: BasisConfig) -> np.ndarray:
    """Knot averages, a convenient location for each basis function."""
    t, p = config.knots(), config.degree
    if p == 0:
        return 0.5 * (t[:-1] + t[1:])[: config.n_basis]
    g = np.array([t[k + 1 : k + p + 1].mean() for k in range(len(t) - p - 1)])
    return g[: config.n_basis]


class Model:
    """A :class:`ModelSpec` compiled against data.

    Parameters
    ----------
    spec : ModelSpec
    data : Dataset
    centering : dict, optional
        Column means per smooth block name, used instead of data means so a
        saved fit can be re-evaluated on new data with identical designs.
    """

    def __init__(self, spec: ModelSpec, data: Dataset, centering: dict | None = None):
        self.spec = spec
        self.data = data
        self.T = data.T
        self.N = spec.n_states
        centering = centering or {}
        for cov in spec.covariates:
            if cov not in data.columns:
                raise ConfigError(f"covariate column {cov!r} missing from data")
            if not np.all(np.isfinite(data[cov])):
                raise DomainError(f"covariate {cov!r} contains missing or non-finite values")

        fixed: list[str] = []
        self.blocks: list[Block] = []
        self._X: list[np.ndarray] = []
        self._init: dict[int, float] = {}
        self._block_init: dict[int, np.ndarray] = {}

        def add_block(name, term, lambda0, kind, covariate, X):
            self.blocks.append(Block(name, term, float(lambda0), kind, covariate))
            self._X.append(X)
            return len(self.blocks) - 1

        def smooth_block(sm: SmoothSpec, target: str, kind: str):
            x = data[sm.covariate]
            cfg = BasisConfig(sm.n_basis, sm.degree, _resolve_domain(x, sm.domain), sm.cyclic,
                              sm.penalty_order, "center")
            name = f"s({sm.covariate}):{target}"
            term = make_term(cfg, sm.penalty, x=x, col_means=centering.get(name))
            lam0 = sm.lambda0 if sm.lambda0 is not None else DEFAULT_LAMBDA0[kind]
            return add_block(name, term, lam0, kind, sm.covariate, term.design(x))

        self.streams: list[_Stream] = []
        for st in spec.streams:
            if st.column not in data.columns:
                raise ConfigError(f"observation column {st.column!r} missing from data")
            x = data[st.column]
            missing = ~np.isfinite(x)
            if missing.all():
                raise DomainError(f"observation column {st.column!r} has no observed values")
            if st.family == "spline":
                dom = _resolve_domain(x, st.domain)
                cfg = BasisConfig(st.n_basis, st.degree, dom, False, st.penalty_order,
                                  "drop_first_coef")
                xs = np.where(missing, dom[0], x)
                lo, hi = dom
                if np.any((xs < lo) | (xs > hi)):
                    raise DomainError(f"column {st.column!r} has values outside density domain {dom}")
                c = basis_integrals(cfg)
                Bstd = full_design(cfg, xs) / c
                comp = _Stream(st, xs, missing, Bstd=Bstd, basis=cfg, norm_consts=c, blocks=[])
                lam0 = st.lambda0 if st.lambda0 is not None else DEFAULT_LAMBDA0["density"]
                centers = greville(cfg)
                qs = self._quantiles(x[~missing])
                spread = (hi - lo) / (2.0 * self.N)
                for i in range(self.N):
                    term = make_term(cfg, st.penalty)
                    blk = add_block(f"f({st.column})[{i + 1}]", term, lam0, "density", None, None)
                    logw = -0.5 * ((centers - qs[i]) / spread) ** 2
                    self._block_init[blk] = logw[1:] - logw[0]
                    comp.blocks.append(blk)
                self.streams.append(comp)
                continue

            fam = get_family(st.family)
            fill = {"gaussian": 0.0, "gamma": 1.0, "vonmises": 0.0}[fam.name]
            xs = np.where(missing, fill, x)
            fam.check_support(xs)
            comp = _Stream(st, xs, missing, family=fam, preds=[])
            init = self._parametric_init(fam, x[~missing], st.init)
            for k, pname in enumerate(fam.params):
                per_state = []
                for i in range(self.N):
                    fixed.append(f"{st.column}.{pname}[{i + 1}]")
                    self._init[len(fixed) - 1] = _to_working(fam, k, init[k][i])
                    pred = _Predictor(len(fixed) - 1, [])
                    for es in st.smooths:
                        if es.parameter == pname and es.state == i:
                            pred.blocks.append(
                                smooth_block(es.smooth, f"{st.column}.{pname}[{i + 1}]", "emission"))
                    per_state.append(pred)
                comp.preds.append(per_state)
            self.streams.append(comp)

        N = self.N
        if spec.tpm_init is not None:
            g0 = np.asarray(spec.tpm_init, dtype=float)
        else:
            off = (1.0 - spec.self_transition) / max(N - 1, 1)
            g0 = np.full((N, N), off)
            np.fill_diagonal(g0, spec.self_transition)
        self.tpm_preds: dict[tuple[int, int], _Predictor] = {}
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                fixed.append(f"tpm[{i + 1},{j + 1}]")
                self._init[len(fixed) - 1] = float(np.log(g0[i, j] / g0[i, i]))
                self.tpm_preds[(i, j)] = _Predictor(len(fixed) - 1, [])
        for ts in spec.tpm_smooths:
            self.tpm_preds[(ts.i, ts.j)].blocks.append(
                smooth_block(ts.smooth, f"tpm[{ts.i + 1},{ts.j + 1}]", "tpm"))
        self.homogeneous = not spec.tpm_smooths

        self.delta_index = None
        if spec.initial == "estimated" and N > 1:
            self.delta_index = len(fixed)
            for i in range(1, N):
                fixed.append(f"delta[{i + 1}]")
                self._init[len(fixed) - 1] = 0.0

        self.layout = ParamLayout(tuple(fixed), tuple(b.name for b in self.blocks),
                                  tuple(b.term.K for b in self.blocks))
        self._slices = self.layout.block_slices

    # ------------------------------------------------------------------ setup
    def _quantiles(self, x):
        return np.quantile(x, (np.arange(self.N) + 0.5) / self.N)

    def _parametric_init(self, fam, x, user):
        N = self.N
        q = self._quantiles(x)
        sd = np.std(x) / N if x.size > 1 else 1.0
        sd = sd if sd > 0 else 1.0
        if fam.name == "gaussian":
            init = [q, np.full(N, sd)]
        elif fam.name == "gamma":
            q = np.maximum(q, 1e-3 * max(np.mean(x), 1e-12))
            init = [q, q.copy()]
        else:
            init = [np.zeros(N), 0.5 + np.arange(N, dtype=float)]
        if user:
            for k, pname in enumerate(fam.params):
                if pname in user:
                    vals = np.asarray(user[pname], dtype=float)
                    if vals.shape != (N,):
                        raise ConfigError(f"init[{pname!r}] must have {N} entries")
                    init[k] = vals
        return init

    @property
    def terms(self) -> list[SmoothTerm]:
        return [b.term for b in self.blocks]

    @property
    def lambda0(self) -> np.ndarray:
        return np.array([b.lambda0 for b in self.blocks])

    def initial_theta(self) -> np.ndarray:
        theta = np.zeros(self.layout.size)
        for k, v in self._init.items():
            theta[k] = v
        for blk, v in self._block_init.items():
            theta[self._slices[blk]] = v
        return theta

    def param_vector(self, theta) -> ParamVector:
        return ParamVector(np.asarray(theta, dtype=float), self.layout)

    def centering(self) -> dict:
        return {b.name: b.term.col_means.tolist() for b in self.blocks
                if b.term.col_means is not None}

    # ------------------------------------------------------------ evaluation
    def _eta(self, theta, pred: _Predictor, designs, n):
        eta = np.full(n, theta[pred.intercept])
        for blk in pred.blocks:
            X = designs[blk]
            if X is not None:
                eta += X @ theta[self._slices[blk]]
        return eta

    def _designs_at(self, covariates: dict):
        out = []
        for b in self.blocks:
            if b.covariate is not None and b.covariate in covariates:
                out.append(b.term.design(np.asarray(covariates[b.covariate], dtype=float)))
            else:
                out.append(None)
        return out

    def tpm_eta(self, theta, designs=None, n=None):
        """Transition predictors, ``(1, N, N)`` if homogeneous else ``(n, N, N)``."""
        N = self.N
        if designs is None:
            designs, n = self._X, self.T
        if self.homogeneous:
            n = 1
        eta = np.zeros((n, N, N))
        for (i, j), pred in self.tpm_preds.items():
            eta[:, i, j] = self._eta(theta, pred, designs, n)
        return eta

    def tpm_at(self, theta, covariates: dict) -> np.ndarray:
        """Transition matrices at new covariate values; absent covariates contribute zero."""
        n = len(next(iter(covariates.values()))) if covariates else 1
        designs = self._designs_at(covariates)
        return tpm_multinomial(self.tpm_eta(theta, designs, n))

    def emission_params_at(self, theta, covariates: dict) -> dict:
        """Natural-scale emission parameters ``{(column, param): (n, N)}``."""
        n = len(next(iter(covariates.values()))) if covariates else 1
        designs = self._designs_at(covariates)
        out = {}
        for s in self.streams:
            if s.family is None:
                continue
            for k, pname in enumerate(s.family.params):
                W = np.column_stack([self._eta(theta, pred, designs, n) for pred in s.preds[k]])
                out[(s.spec.column, pname)] = _from_working(s.family, k, W)
        return out

    def density_weights(self, theta) -> dict:
        return {s.spec.column: np.array([softmax_weights(theta[self._slices[b]]) for b in s.blocks])
                for s in self.streams if s.family is None}

    def delta_from(self, theta, gammas):
        N = self.N
        if N == 1:
            return np.ones(1)
        if self.spec.initial == "uniform":
            return np.full(N, 1.0 / N)
        if self.spec.initial == "estimated":
            return softmax_weights(theta[self.delta_index : self.delta_index + N - 1])
        return stationary(gammas.mean(axis=0))

    def components(self, theta, grad: bool = False):
        """Initial distribution, transition matrices, log-emission matrix (and link derivatives)."""
        theta = np.asarray(theta, dtype=float)
        T, N = self.T, self.N
        logp = np.zeros((T, N))
        derivs = []
        for s in self.streams:
            if s.family is None:
                ds = []
                for i, blk in enumerate(s.blocks):
                    lp, dl = spline_logpdf_working(s.Bstd, theta[self._slices[blk]], grad)
                    lp[s.missing] = 0.0
                    if grad:
                        dl[s.missing] = 0.0
                    logp[:, i] += lp
                    ds.append(dl)
                derivs.append(ds)
                continue
            W = [np.column_stack([self._eta(theta, pred, self._X, T) for pred in per_state])
                 for per_state in s.preds]
            lp, dl = s.family.logpdf_working(s.x[:, None], W, grad)
            lp[s.missing] = 0.0
            logp += lp
            if grad:
                for d in dl:
                    d[s.missing] = 0.0
            derivs.append(dl)
        gammas = tpm_multinomial(self.tpm_eta(theta))
        delta = self.delta_from(theta, gammas)
        return delta, gammas, logp, derivs

    def loglik(self, theta) -> float:
        delta, gammas, logp, _ = self.components(theta)
        try:
            return forward_loglik(delta, gammas, logp)
        except NumericalError:
            return -np.inf

    def loglik_grad(self, theta):
        """Log-likelihood and its exact gradient w.r.t. ``theta``."""
        theta = np.asarray(theta, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            delta, gammas, logp, derivs = self.components(theta, grad=True)
        if not np.all(np.isfinite(logp)) or not np.all(np.isfinite(gammas)):
            return -np.inf, np.full(theta.size, np.nan)
        try:
            ll, probs, xi = forward_backward(delta, gammas, logp)
        except NumericalError:
            return -np.inf, np.full(theta.size, np.nan)
        g = np.zeros(theta.size)

        for s, dl in zip(self.streams, derivs):
            if s.family is None:
                for i, blk in enumerate(s.blocks):
                    g[self._slices[blk]] += probs[:, i] @ dl[i]
                continue
            for k, per_state in enumerate(s.preds):
                w = probs * dl[k]
                for i, pred in enumerate(per_state):
                    g[pred.intercept] += w[:, i].sum()
                    for blk in pred.blocks:
                        g[self._slices[blk]] += self._X[blk].T @ w[:, i]

        N = self.N
        if N > 1:
            d_eta = xi - gammas * xi.sum(axis=-1, keepdims=True)
            g_delta = probs[0] / np.where(delta > 0, delta, 1.0)
            if self.spec.initial == "stationary":
                gbar = gammas.mean(axis=0)
                H = stationary_sensitivity(gbar, delta, g_delta) / gammas.shape[0]
                d_eta = d_eta + gammas * (H - (H * gammas).sum(axis=-1, keepdims=True))
            elif self.spec.initial == "estimated":
                k0 = self.delta_index
                g[k0 : k0 + N - 1] += probs[0, 1:] - delta[1:]
            for (i, j), pred in self.tpm_preds.items():
                col = d_eta[:, i, j]
                g[pred.intercept] += col.sum()
                for blk in pred.blocks:
                    g[self._slices[blk]] += self._X[blk].T @ col
        return ll, g

    # --------------------------------------------------------------- outputs
    def decode(self, theta) -> np.ndarray:
        delta, gammas, logp, _ = self.components(theta)
        return viterbi(delta, gammas, logp)

    def state_probs(self, theta) -> np.ndarray:
        delta, gammas, logp, _ = self.components(theta)
        return forward_backward(delta, gammas, logp)[1]

    def natural_params(self, theta) -> dict:
        """Intercept-level parameters on the natural scale, keyed by fixed-effect name."""
        out = {}
        names = self.layout.fixed_names
        for s in self.streams:
            if s.family is None:
                continue
            for k, per_state in enumerate(s.preds):
                for pred in per_state:
                    out[names[pred.intercept]] = float(
                        _from_working(s.family, k, np.array(theta[pred.intercept])))
        G = tpm_multinomial(self.tpm_eta(theta, self._designs_at({}), 1))[0]
        for (i, j), pred in self.tpm_preds.items():
            out[names[pred.intercept]] = float(G[i, j])
        return out

    def curve_grid(self, n_grid: int = 200) -> dict:
        grids = {}
        for b in self.blocks:
            if b.covariate is not None and b.covariate not in grids:
                lo, hi = b.term.config.domain
                grids[b.covariate] = np.linspace(lo, hi, n_grid)
        for s in self.streams:
            if s.family is None:
                lo, hi = s.basis.domain
                grids[s.spec.column] = np.linspace(lo, hi, n_grid)
        return grids

    def curves(self, theta, grids: dict | None = None) -> dict:
        """Every smooth evaluated on a grid of its covariate.

        Keys are ``gamma[i,j]`` for transition smooths (probabilities),
        ``column.param[i]`` for emission smooths (natural scale) and
        ``density:column[i]`` for spline densities. Smooths of other
        covariates contribute zero (their centered mean).
        """
        grids = grids or self.curve_grid()
        theta = np.asarray(theta, dtype=float)
        out = {}
        for (i, j), pred in self.tpm_preds.items():
            covs = {self.blocks[b].covariate for b in pred.blocks}
            for cov in covs:
                G = self.tpm_at(theta, {cov: grids[cov]})
                out[f"gamma[{i + 1},{j + 1}]|{cov}"] = G[:, i, j]
        for s in self.streams:
            if s.family is None:
                x = grids[s.spec.column]
                B = full_design(s.basis, x) / s.norm_consts
                for i, blk in enumerate(s.blocks):
                    out[f"density:{s.spec.column}[{i + 1}]"] = B @ softmax_weights(theta[self._slices[blk]])
                continue
            for k, per_state in enumerate(s.preds):
                for i, pred in enumerate(per_state):
                    for cov in {self.blocks[b].covariate for b in pred.blocks}:
                        designs = self._designs_at({cov: grids[cov]})
                        W = self._eta(theta, pred, designs, len(grids[cov]))
                        name = f"{s.spec.column}.{s.family.params[k]}[{i + 1}]|{cov}"
                        out[name] = _from_working(s.family, k, W)
        return out

    def check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise ModelError(f"theta has {theta.shape}, model expects ({self.layout.size},)")
        return theta


def _to_working(fam, k, value):
    return float(apply_link(fam.links[k], np.asarray(value, dtype=float)))


def _from_working(fam, k, W):
    return inverse_link(fam.links[k], W)
