"""B-spline bases and quadratic roughness penalties.

Bases use equally spaced knots. Non-cyclic bases are clamped (boundary knots
repeated ``degree + 1`` times) so the partition of unity holds on the whole
domain; cyclic bases wrap with period ``hi - lo``.

Identifiability is handled by a linear coefficient map ``Z`` applied on the
right of the full design matrix:

* ``"none"`` keeps every basis function;
* ``"drop_first_coef"`` fixes the first coefficient at zero (used for spline
  densities, where the coefficients enter a multinomial logit);
* ``"center"`` subtracts the column means of the design and removes the
  constant direction with an orthonormal complement of the ones vector
  (sum-to-zero smooths for additive predictors).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import comb

from .errors import ConfigError, DomainError

CONSTRAINTS = ("none", "drop_first_coef", "center")
PENALTIES = ("difference", "derivative")


@dataclass(frozen=True)
class BasisConfig:
    """Layout of one spline basis.

    Parameters
    ----------
    n_basis : int
        Number of basis functions before the identifiability constraint.
    degree : int
        Polynomial degree (3 = cubic).
    domain : tuple of float
        Closed interval ``(lo, hi)``.
    cyclic : bool
        Wrap the basis at the boundary.
    penalty_order : int
        Order of the difference (or derivative) penalty.
    constraint : str
        One of ``"none"``, ``"drop_first_coef"``, ``"center"``.
    """

    n_basis: int
    degree: int = 3
    domain: tuple[float, float] = (0.0, 1.0)
    cyclic: bool = False
    penalty_order: int = 2
    constraint: str = "none"

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
            raise ConfigError(f"basis domain must satisfy lo < hi, got {self.domain}")
        if self.degree < 0:
            raise ConfigError("degree must be non-negative")
        if self.n_basis < self.degree + 1:
            raise ConfigError(
                f"n_basis={self.n_basis} too small for degree {self.degree} "
                f"(need at least {self.degree + 1})"
            )
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"unknown constraint {self.constraint!r}")
        if self.penalty_order < 1 or self.penalty_order >= self.n_basis:
            raise ConfigError(
                f"penalty_order={self.penalty_order} must lie in [1, n_basis)"
            )

    @property
    def K(self) -> int:
        """Number of free coefficients after the identifiability constraint."""
        return self.n_basis - (self.constraint != "none")

    @property
    def period(self) -> float:
        return self.domain[1] - self.domain[0]

    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        p = self.degree
        if self.cyclic:
            h = self.period / self.n_basis
            return lo + (np.arange(self.n_basis + 2 * p + 1) - p) * h
        breaks = np.linspace(lo, hi, self.n_basis - p + 1)
        return np.concatenate([np.full(p, lo), breaks, np.full(p, hi)])


def _safe_ratio(num, den):
    out = np.zeros(np.broadcast_shapes(np.shape(num), np.shape(den)))
    nz = np.broadcast_to(den != 0, out.shape)
    np.divide(num, den, out=out, where=nz)
    return out


def cox_de_boor(knots: np.ndarray, degree: int, x: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Evaluate all B-splines (or their derivatives) on a knot vector.

    Dense triangular Cox--de Boor recursion; returns an array of shape
    ``(len(x), len(knots) - degree - 1)``. Points equal to the last knot are
    assigned to the last non-degenerate span.
    """
    t = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    if deriv > degree:
        return np.zeros((x.size, t.size - degree - 1))

    xc = x[:, None]
    B = ((t[:-1] <= xc) & (xc < t[1:])).astype(float)
    spans = np.flatnonzero(t[:-1] < t[1:])
    if spans.size:
        last = spans[-1]
        B[x == t[last + 1], last] = 1.0

    for q in range(1, degree - deriv + 1):
        left = _safe_ratio(xc - t[: -q - 1], t[q:-1] - t[: -q - 1])
        right = _safe_ratio(t[q + 1 :] - xc, t[q + 1 :] - t[1:-q])
        B = left * B[:, :-1] + right * B[:, 1:]
    for q in range(degree - deriv + 1, degree + 1):
        a = _safe_ratio(q, t[q:-1] - t[: -q - 1])
        b = _safe_ratio(q, t[q + 1 :] - t[1:-q])
        B = a * B[:, :-1] - b * B[:, 1:]
    return B


def _reduce(config: BasisConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    lo, hi = config.domain
    if config.cyclic:
        r = lo + np.mod(x - lo, config.period)
        r[r >= hi] = lo
        return r
    tol = 1e-12 * config.period
    bad = (x < lo - tol) | (x > hi + tol) | ~np.isfinite(x)
    if bad.any():
        raise DomainError(
            f"{int(bad.sum())} value(s) outside basis domain [{lo}, {hi}], "
            f"e.g. {x[bad][0]!r}"
        )
    return np.clip(x, lo, hi)


def full_design(config: BasisConfig, x, deriv: int = 0) -> np.ndarray:
    """Design matrix with all ``n_basis`` columns (no constraint applied)."""
    xr = _reduce(config, x)
    B = cox_de_boor(config.knots(), config.degree, xr, deriv)
    if config.cyclic:
        K = config.n_basis
        folded = B[:, :K].copy()
        folded[:, : B.shape[1] - K] += B[:, K:]
        return folded
    return B


def bspline_design(config: BasisConfig, x, deriv: int = 0) -> np.ndarray:
    """Design matrix at ``x``.

    With ``constraint="drop_first_coef"`` the first column is omitted. The
    ``"center"`` constraint needs column means and is applied by
    :meth:`SmoothTerm.design`; here it returns the full design.
    """
    B = full_design(config, x, deriv)
    if config.constraint == "drop_first_coef":
        return B[:, 1:]
    return B


def basis_integrals(config: BasisConfig) -> np.ndarray:
    """Exact integrals of each basis function over the domain."""
    if config.cyclic:
        return np.full(config.n_basis, config.period / config.n_basis)
    t = config.knots()
    p = config.degree
    return (t[p + 1 :] - t[: -p - 1]) / (p + 1)


def constraint_map(config: BasisConfig) -> np.ndarray:
    """Matrix ``Z`` mapping free coefficients to full coefficients."""
    n = config.n_basis
    if config.constraint == "none":
        return np.eye(n)
    if config.constraint == "drop_first_coef":
        return np.eye(n)[:, 1:]
    Q, _ = np.linalg.qr(np.ones((n, 1)), mode="complete")
    return Q[:, 1:]


def _difference_matrix(n: int, order: int) -> np.ndarray:
    return np.diff(np.eye(n), n=order, axis=0)


def difference_penalty(n_basis: int, order: int = 2, constraint: str = "none") -> np.ndarray:
    """``D^T D`` for the order-th difference matrix over ``n_basis`` coefficients.

    ``drop_first_coef`` drops the column of ``D`` acting on the fixed
    coefficient; ``center`` projects with the orthonormal complement of ones.

    Examples
    --------
    >>> difference_penalty(3, 2)
    array([[ 1., -2.,  1.],
           [-2.,  4., -2.],
           [ 1., -2.,  1.]])
    """
    if order < 1 or order >= n_basis:
        raise ConfigError(f"difference order {order} must lie in [1, {n_basis})")
    if constraint not in CONSTRAINTS:
        raise ConfigError(f"unknown constraint {constraint!r}")
    D = _difference_matrix(n_basis, order)
    S = D.T @ D
    Z = constraint_map(BasisConfig(n_basis, degree=0, penalty_order=order, constraint=constraint))
    return Z.T @ S @ Z


def cyclic_penalty(config: BasisConfig) -> np.ndarray:
    """Difference penalty with differences wrapped modulo ``n_basis``."""
    if not config.cyclic:
        raise ConfigError("cyclic_penalty requires a cyclic basis")
    n, order = config.n_basis, config.penalty_order
    stencil = np.array([(-1) ** (order - j) * comb(order, j, exact=True) for j in range(order + 1)],
                       dtype=float)
    D = np.zeros((n, n))
    for r in range(n):
        for j, w in enumerate(stencil):
            D[r, (r + j) % n] += w
    Z = constraint_map(config)
    return Z.T @ (D.T @ D) @ Z


def derivative_penalty(config: BasisConfig) -> np.ndarray:
    """Integrated squared derivative penalty with entries ``int B_j^(m) B_k^(m)``.

    ``m`` is ``config.penalty_order``. Integration is Gauss--Legendre per knot
    span with enough nodes to be exact for the piecewise-polynomial integrand.
    """
    m, p = config.penalty_order, config.degree
    if p < 2 or p < m:
        raise ConfigError(f"derivative penalty of order {m} needs degree >= max(2, {m}), got {p}")
    n_nodes = max(int(np.ceil((2 * p - 3) / 2)) + 1, p - m + 1)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)

    lo, hi = config.domain
    if config.cyclic:
        edges = np.linspace(lo, hi, config.n_basis + 1)
    else:
        edges = np.unique(config.knots())
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    xq = ((a + b)[:, None] * 0.5 + half[:, None] * nodes[None, :]).ravel()
    wq = (half[:, None] * weights[None, :]).ravel()
    if config.cyclic:
        xq = np.minimum(xq, np.nextafter(hi, lo))
    Bd = full_design(config, xq, deriv=m)
    S = Bd.T @ (wq[:, None] * Bd)
    S = 0.5 * (S + S.T)
    Z = constraint_map(config)
    return Z.T @ S @ Z


def penalty_eigen(S, eps: float = 1e-10):
    """Eigendecomposition ``S = U diag(eigvals) U^T`` with nullspace detection.

    Returns ``(U, eigvals, m)`` with eigenvalues sorted in descending order and
    ``m`` the number of eigenvalues below ``eps * max(max_eig, 1)``; those are
    set to exactly zero.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"penalty must be square, got shape {S.shape}")
    scale = max(1.0, float(np.abs(S).max(initial=0.0)))
    if np.abs(S - S.T).max(initial=0.0) > 1e-10 * scale:
        raise ValueError("penalty matrix is not symmetric")
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    thresh = eps * max(float(w.max(initial=0.0)), 1.0)
    null = w < thresh
    w = np.where(null, 0.0, w)
    return U, w, int(null.sum())


@dataclass(frozen=True, eq=False)
class SmoothTerm:
    """A penalized basis expansion ready for use in a model.

    ``S`` acts on the ``K`` free coefficients; ``Z`` maps them to the full
    basis and ``col_means`` (``center`` constraint only) holds the design
    column means subtracted before mapping.
    """

    config: BasisConfig
    S: np.ndarray
    U: np.ndarray
    eigvals: np.ndarray
    m: int
    penalty: str = "difference"
    Z: np.ndarray = field(default=None, repr=False)
    col_means: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.S.shape[0]

    @property
    def rank(self) -> int:
        return self.K - self.m

    def design(self, x, deriv: int = 0) -> np.ndarray:
        B = full_design(self.config, x, deriv)
        if self.col_means is not None and deriv == 0:
            B = B - self.col_means
        return B @ self.Z


def make_term(config: BasisConfig, penalty: str = "difference", x=None, eps: float = 1e-10,
              col_means=None) -> SmoothTerm:
    """Build a :class:`SmoothTerm` from a configuration.

    For ``constraint="center"`` the column means are taken from ``col_means``
    if given, else from the design at ``x``, else from the basis integrals
    (uniform covariate law).
    """
    if penalty not in PENALTIES:
        raise ConfigError(f"unknown penalty {penalty!r}; expected one of {PENALTIES}")
    if penalty == "derivative":
        S = derivative_penalty(config)
    elif config.cyclic:
        S = cyclic_penalty(config)
    else:
        S = difference_penalty(config.n_basis, config.penalty_order, config.constraint)
    U, eigvals, m = penalty_eigen(S, eps)
    means = None
    if config.constraint == "center":
        if col_means is not None:
            means = np.asarray(col_means, dtype=float)
        elif x is not None:
            means = full_design(config, x).mean(axis=0)
        else:
            means = basis_integrals(config) / config.period
    return SmoothTerm(config, S, U, eigvals, m, penalty, constraint_map(config), means)
