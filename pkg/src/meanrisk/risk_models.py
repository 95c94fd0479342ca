"""Covariance models and fast inverse application.

Every model implements the :class:`RiskModel` interface.  The central
primitive is ``solve(x, active)``, which applies the inverse of the
covariance restricted to an index subset ``J`` and returns a full-length
vector with zeros off ``J``.  Factor models do this with K x K work only.
"""
from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla

from .errors import ModelError, NumericalError, ValidationError
from .market_data import ReturnsPanel, read_matrix_csv

log = logging.getLogger(__name__)

DENSE_CAP = 2000
_COND_LIMIT = 1e14
FORMAT_VERSION = 1

__all__ = [
    "DENSE_CAP",
    "RiskModel",
    "DenseCovariance",
    "DiagonalCovariance",
    "UniformCorrelationModel",
    "FactorModel",
    "StatisticalModel",
    "ConstraintSet",
    "PaddedFactorModel",
    "ProjectedInverse",
    "as_risk_model",
    "build_factor_model",
    "woodbury_inverse_apply",
    "effective_rank",
    "erank_factor_count",
    "sample_correlation_spectrum",
    "build_statistical_model",
    "remove_market_mode_factor",
    "inverse_variance_benchmark",
    "pad_with_constraints",
    "uniform_correlation_inverse_weights",
    "uniform_correlation_decomposition",
    "write_risk_model",
    "read_risk_model",
    "read_constraints_csv",
]


def _active_index(n: int, active) -> np.ndarray:
    if active is None:
        return np.arange(n)
    idx = np.asarray(active)
    if idx.dtype == bool:
        if idx.shape != (n,):
            raise ValidationError("boolean active mask has the wrong length")
        idx = np.flatnonzero(idx)
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        raise ValidationError("active set is empty")
    if idx.min() < 0 or idx.max() >= n or np.unique(idx).size != idx.size:
        raise ValidationError("active set has out-of-range or repeated indices")
    return idx


def _scatter(n: int, idx: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros((n,) + y.shape[1:])
    out[idx] = y
    return out


def _spd_solve(m: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        factor = sla.cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite", condition=float(np.linalg.cond(m))) from None
    d = np.diag(factor[0])
    if d.min() <= 0 or (d.max() / d.min()) ** 2 > _COND_LIMIT:
        raise NumericalError(f"{what} is numerically singular", condition=float(np.linalg.cond(m)))
    return sla.cho_solve(factor, rhs, check_finite=False)


class RiskModel(ABC):
    """A symmetric positive-definite covariance operator on N instruments."""

    @property
    @abstractmethod
    def n(self) -> int: ...

    @abstractmethod
    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Return C x (x may be a vector or an N x k block)."""

    @abstractmethod
    def solve(self, x: np.ndarray, active=None) -> np.ndarray:
        """Return [C(J)]^-1 x_J scattered into a length-N vector (zeros off J)."""

    @abstractmethod
    def diag(self) -> np.ndarray: ...

    def to_dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.n > cap:
            raise ValidationError(f"dense materialization refused for N = {self.n} > cap {cap}")
        return self.matvec(np.eye(self.n))

    def quad(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.matvec(x))

    def scaled(self, factor: float) -> "RiskModel":
        """The same model with covariance multiplied by ``factor`` > 0."""
        return DenseCovariance(factor * self.to_dense())


class DenseCovariance(RiskModel):
    def __init__(self, cov):
        c = np.array(cov, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
            raise ValidationError("covariance must be a square matrix")
        if not np.all(np.isfinite(c)):
            raise ValidationError("covariance has non-finite entries")
        if not np.allclose(c, c.T, rtol=1e-12, atol=1e-14 * np.abs(c).max()):
            raise ModelError("covariance is not symmetric")
        c = 0.5 * (c + c.T)
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            raise ModelError("covariance is not positive definite") from None
        c.flags.writeable = False
        self.cov = c

    @property
    def n(self) -> int:
        return self.cov.shape[0]

    def matvec(self, x):
        return self.cov @ np.asarray(x, dtype=float)

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        sub = self.cov[np.ix_(idx, idx)]
        return _scatter(self.n, idx, _spd_solve(sub, x[idx], "covariance"))

    def diag(self):
        return np.diag(self.cov).copy()

    def to_dense(self, cap: int = DENSE_CAP):
        return self.cov.copy()

    def scaled(self, factor):
        return DenseCovariance(factor * self.cov)


class DiagonalCovariance(RiskModel):
    def __init__(self, variances):
        v = np.array(variances, dtype=float)
        if v.ndim != 1 or v.size < 1 or not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ModelError("diagonal variances must be positive and finite")
        v.flags.writeable = False
        self.variances = v

    @property
    def n(self):
        return self.variances.size

    def _col(self, x):
        return self.variances if x.ndim == 1 else self.variances[:, None]

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        return self._col(x) * x

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        v = self.variances[idx] if x.ndim == 1 else self.variances[idx][:, None]
        return _scatter(self.n, idx, x[idx] / v)

    def diag(self):
        return self.variances.copy()

    def scaled(self, factor):
        return DiagonalCovariance(factor * self.variances)


class UniformCorrelationModel(RiskModel):
    """C_ij = sigma_i sigma_j [(1 - rho) delta_ij + rho]."""

    def __init__(self, sigma, rho: float):
        s = np.array(sigma, dtype=float)
        if s.ndim != 1 or s.size < 1 or np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValidationError("sigma must be a positive vector")
        n = s.size
        lower = -1.0 / (n - 1) if n > 1 else -1.0
        if not lower < rho < 1.0:
            raise ValidationError(f"rho = {rho} outside the positive-definite range ({lower:.6g}, 1)")
        s.flags.writeable = False
        self.sigma = s
        self.rho = float(rho)

    @property
    def n(self):
        return self.sigma.size

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        s = self.sigma if x.ndim == 1 else self.sigma[:, None]
        y = s * x
        return s * ((1.0 - self.rho) * y + self.rho * y.sum(axis=0))

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        s = self.sigma[idx] if x.ndim == 1 else self.sigma[idx][:, None]
        xt = x[idx] / s
        shrink = self.rho / (1.0 + (idx.size - 1) * self.rho)
        y = (xt - shrink * xt.sum(axis=0)) / (s * (1.0 - self.rho))
        return _scatter(self.n, idx, y)

    def diag(self):
        return self.sigma**2

    def scaled(self, factor):
        return UniformCorrelationModel(self.sigma * math.sqrt(factor), self.rho)

    def to_factor_model(self) -> "FactorModel":
        if self.rho <= 0:
            raise ModelError("only rho > 0 has a one-factor representation with PD factor covariance")
        return FactorModel(self.sigma**2 * (1.0 - self.rho), self.sigma[:, None], [[self.rho]])


class FactorModel(RiskModel):
    """C = diag(xi2) + Omega phi Omega^T with K x K factor covariance phi."""

    def __init__(self, xi2, loadings, factor_cov):
        xi2 = np.array(xi2, dtype=float)
        n = xi2.size
        om = np.array(loadings, dtype=float).reshape(n, -1) if n else np.zeros((0, 0))
        k = om.shape[1]
        phi = np.array(factor_cov, dtype=float).reshape(k, k)
        if xi2.ndim != 1 or n < 1 or not np.all(np.isfinite(xi2)) or np.any(xi2 <= 0):
            raise ModelError("specific variances must be positive and finite")
        if k > n:
            raise ModelError(f"K = {k} factors exceed N = {n} instruments")
        if not (np.all(np.isfinite(om)) and np.all(np.isfinite(phi))):
            raise ModelError("loadings and factor covariance must be finite")
        if k:
            if not np.allclose(phi, phi.T, rtol=1e-12, atol=1e-15 * max(1.0, np.abs(phi).max())):
                raise ModelError("factor covariance is not symmetric")
            phi = 0.5 * (phi + phi.T)
            if np.linalg.eigvalsh(phi).min() <= 0:
                raise ModelError("factor covariance is not positive definite")
            phi_inv = np.linalg.inv(phi)
            phi_inv = 0.5 * (phi_inv + phi_inv.T)
        else:
            phi_inv = np.zeros((0, 0))
        for a in (xi2, om, phi, phi_inv):
            a.flags.writeable = False
        self.xi2, self.loadings, self.factor_cov, self.phi_inv = xi2, om, phi, phi_inv

    @property
    def n(self):
        return self.xi2.size

    @property
    def k(self):
        return self.loadings.shape[1]

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        xi2 = self.xi2 if x.ndim == 1 else self.xi2[:, None]
        return xi2 * x + self.loadings @ (self.factor_cov @ (self.loadings.T @ x))

    def q_matrix(self, active=None) -> np.ndarray:
        """Q(J) = phi^-1 + sum_{i in J} Omega_i Omega_i^T / xi_i^2."""
        idx = _active_index(self.n, active)
        om = self.loadings[idx]
        return self.phi_inv + (om / self.xi2[idx, None]).T @ om

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        z = 1.0 / self.xi2[idx]
        zx = (z * x[idx].T).T
        if self.k == 0:
            return _scatter(self.n, idx, zx)
        om = self.loadings[idx]
        q = self.phi_inv + (om * z[:, None]).T @ om
        corr = om @ _spd_solve(q, om.T @ zx, "Q(J)")
        return _scatter(self.n, idx, zx - (z * corr.T).T)

    def diag(self):
        return self.xi2 + np.einsum("ia,ab,ib->i", self.loadings, self.factor_cov, self.loadings)

    def to_dense(self, cap: int = DENSE_CAP):
        if self.n > cap:
            raise ValidationError(f"dense materialization refused for N = {self.n} > cap {cap}")
        return np.diag(self.xi2) + self.loadings @ self.factor_cov @ self.loadings.T

    def scaled(self, factor):
        return FactorModel(factor * self.xi2, self.loadings, factor * self.factor_cov)

    def shifted(self, shift) -> "FactorModel":
        """Factor model with specific variances reduced by ``shift`` (scalar or vector)."""
        return FactorModel(self.xi2 - shift, self.loadings, self.factor_cov)


def as_risk_model(obj) -> RiskModel:
    """Coerce a RiskModel or a dense covariance array into a RiskModel."""
    if isinstance(obj, RiskModel):
        return obj
    return DenseCovariance(obj)


def build_factor_model(xi2, loadings=None, factor_cov=None) -> FactorModel:
    """Construct and validate a K-factor model (K = 0 when no loadings)."""
    xi2 = np.asarray(xi2, dtype=float)
    if loadings is None:
        return FactorModel(xi2, np.zeros((xi2.size, 0)), np.zeros((0, 0)))
    loadings = np.asarray(loadings, dtype=float).reshape(xi2.size, -1)
    if factor_cov is None:
        factor_cov = np.eye(loadings.shape[1])
    return FactorModel(xi2, loadings, factor_cov)


def woodbury_inverse_apply(model: FactorModel, x, active=None) -> np.ndarray:
    """Apply [C(J)]^-1 to x using only K x K inversions."""
    return model.solve(x, active)


# ----------------------------------------------------------------------
# statistical risk models
# ----------------------------------------------------------------------

def effective_rank(eigenvalues) -> float:
    """exp of the Shannon entropy of the normalized spectrum."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.ndim != 1 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValidationError("eigenvalues must be a finite nonnegative vector")
    total = lam.sum()
    if total <= 0:
        raise ValidationError("spectrum has no positive eigenvalue")
    p = lam[lam > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def erank_factor_count(eigenvalues, rank: int | None = None, truncate: bool = False) -> int:
    """Number of factors from eRank: rounded half-up (or truncated), clamped to [1, rank - 1]."""
    er = effective_rank(eigenvalues)
    k = math.floor(er) if truncate else math.floor(er + 0.5)
    if rank is None:
        rank = int(np.count_nonzero(np.asarray(eigenvalues) > 0))
    upper = max(rank - 1, 1)
    if k > upper:
        log.warning("eRank factor count %d >= rank %d; reducing to %d", k, rank, upper)
        k = upper
    return max(k, 1)


def sample_correlation_spectrum(returns: np.ndarray):
    """Eigen-decomposition of the sample correlation of an N x T return block.

    Returns ``(sigma, eigenvalues, vectors, rank)`` with eigenvalues in
    descending order (stable on ties) and only the ``rank`` numerically
    nonzero modes in ``vectors``.  Works through the T x T Gram matrix when
    T < N.
    """
    r = np.asarray(returns, dtype=float)
    n, t = r.shape
    if t < 2:
        raise ValidationError("need at least two periods for a correlation matrix")
    sigma = r.std(axis=1, ddof=1)
    if np.any(sigma <= 0):
        raise ValidationError("zero-volatility instruments must be dropped first")
    x = (r - r.mean(axis=1, keepdims=True)) / (sigma[:, None] * math.sqrt(t - 1))
    if t < n:
        lam, u = np.linalg.eigh(x.T @ x)
        order = np.argsort(-lam, kind="stable")
        lam, u = lam[order], u[:, order]
        tol = lam[0] * max(n, t) * np.finfo(float).eps * 10
        rank = int(np.count_nonzero(lam > tol))
        vecs = x @ u[:, :rank] / np.sqrt(lam[:rank])
    else:
        lam, v = np.linalg.eigh(x @ x.T)
        order = np.argsort(-lam, kind="stable")
        lam, v = lam[order], v[:, order]
        tol = lam[0] * max(n, t) * np.finfo(float).eps * 10
        rank = int(np.count_nonzero(lam > tol))
        vecs = v[:, :rank]
    lam = np.where(lam > tol, lam, 0.0)
    return sigma, lam[:rank], vecs, rank


class StatisticalModel(RiskModel):
    """PCA-based risk model C = sigma_i sigma_j Psi_ij in factor form.

    ``specific`` holds the correlation-units specific variances that make
    ``diag(Psi) == 1``.  With the market mode removed, the first principal
    component is folded into ``specific`` and kept only for reporting.
    """

    def __init__(self, sigma, eigenvalues, components, specific, market_mode_removed,
                 market_eigenvalue, market_component, erank, signs):
        self.sigma = np.asarray(sigma, dtype=float)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.components = np.asarray(components, dtype=float).reshape(self.sigma.size, -1)
        self.specific = np.asarray(specific, dtype=float)
        self.market_mode_removed = bool(market_mode_removed)
        self.market_eigenvalue = float(market_eigenvalue)
        self.market_component = np.asarray(market_component, dtype=float)
        self.erank = float(erank)
        self.signs = np.asarray(signs, dtype=float)
        if np.any(self.specific <= 0):
            raise ModelError("statistical model has nonpositive specific variance; reduce K")
        self.factor_model = FactorModel(
            self.sigma**2 * self.specific,
            self.sigma[:, None] * self.components,
            np.diag(self.eigenvalues),
        )

    @property
    def n(self):
        return self.sigma.size

    @property
    def k(self):
        return self.components.shape[1]

    def kept_components(self):
        return list(zip(self.eigenvalues.tolist(), self.components.T))

    def correlation(self) -> np.ndarray:
        return np.diag(self.specific) + (self.components * self.eigenvalues) @ self.components.T

    def matvec(self, x):
        return self.factor_model.matvec(x)

    def solve(self, x, active=None):
        return self.factor_model.solve(x, active)

    def diag(self):
        return self.factor_model.diag()

    def to_dense(self, cap: int = DENSE_CAP):
        return self.factor_model.to_dense(cap)

    def scaled(self, factor):
        return self.factor_model.scaled(factor)


def build_statistical_model(panel, remove_market_mode: bool = False, window: int | None = None,
                            truncate: bool = False) -> StatisticalModel:
    """Statistical risk model from the sample correlation of a return panel.

    ``panel`` is a :class:`ReturnsPanel` or an N x T return matrix; ``window``
    limits it to the most recent columns.  The number of factors comes from
    the effective rank of the correlation spectrum.
    """
    r = panel.returns if isinstance(panel, ReturnsPanel) else np.asarray(panel, dtype=float)
    if window is not None:
        r = r[:, : int(window)]
    n = r.shape[0]
    sigma, lam, vecs, rank = sample_correlation_spectrum(r)
    er = effective_rank(lam)
    k = erank_factor_count(lam, rank=rank, truncate=truncate)
    k = min(k, rank)
    # a cut inside a block of tied eigenvalues picks an arbitrary subspace; keep none of the block
    k0 = k
    while 0 < k < lam.size and lam[k - 1] - lam[k] <= 1e-10 * lam[0]:
        k -= 1
    if k != k0:
        log.warning("eRank cut splits tied eigenvalues; keeping %d components instead of %d", k, k0)

    v1 = vecs[:, 0].copy()
    if v1.sum() < 0:
        vecs = vecs.copy()
        vecs[:, 0] = -v1
        v1 = -v1
    signs = np.where(v1 < 0, -1.0, 1.0)
    if np.any(signs < 0):
        log.info("first principal component has %d negative entries", int(np.sum(signs < 0)))

    first = 1 if remove_market_mode else 0
    kept_lam = lam[first:k]
    kept_vec = vecs[:, first:k]
    specific = 1.0 - (kept_vec**2) @ kept_lam
    return StatisticalModel(
        sigma=sigma,
        eigenvalues=kept_lam,
        components=kept_vec if kept_vec.size else np.zeros((n, 0)),
        specific=specific,
        market_mode_removed=remove_market_mode,
        market_eigenvalue=lam[0],
        market_component=v1,
        erank=er,
        signs=signs,
    )


# ----------------------------------------------------------------------
# market mode, constraints
# ----------------------------------------------------------------------

def remove_market_mode_factor(model: FactorModel, v=None) -> FactorModel:
    """Project the loadings orthogonal to a positive benchmark vector ``v``.

    Omega' = Omega - v (v^T Omega) / (v^T v); specific variances are unchanged.
    """
    n = model.n
    v = np.ones(n) if v is None else np.asarray(v, dtype=float)
    if v.shape != (n,) or np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValidationError("benchmark vector must be positive with length N")
    om = model.loadings
    projected = om - np.outer(v, v @ om) / (v @ v)
    return FactorModel(model.xi2, projected, model.factor_cov)


def inverse_variance_benchmark(sigma, winsor=(0.01, 0.99)) -> np.ndarray:
    """v_i = 1 / sigma_i^2 with sigma winsorized at the given quantiles."""
    s = np.asarray(sigma, dtype=float)
    if winsor is not None:
        lo, hi = np.quantile(s, winsor)
        s = np.clip(s, lo, hi)
    return 1.0 / s**2


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """N x m matrix of linear homogeneous constraints sum_i G_ia w_i = 0."""

    g: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        n, m = g.shape
        if not np.all(np.isfinite(g)):
            raise ValidationError("constraint matrix has non-finite entries")
        if m >= n and m > 0:
            raise ValidationError(f"need m < N constraints, got m = {m}, N = {n}")
        if m and np.linalg.matrix_rank(g) < m:
            raise ValidationError("constraint columns are linearly dependent")
        g.flags.writeable = False
        names = tuple(self.names) if self.names else tuple(f"c{j}" for j in range(m))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "names", names)

    @property
    def m(self) -> int:
        return self.g.shape[1]

    @classmethod
    def dollar_neutral(cls, n: int) -> "ConstraintSet":
        return cls(np.ones((n, 1)), ("dollar_neutral",))

    @classmethod
    def empty(cls, n: int) -> "ConstraintSet":
        return cls(np.zeros((n, 0)))


class PaddedFactorModel:
    """Inverse operator of a factor model padded with constraint columns.

    The padded loadings are (Omega | G) with a factor-block inverse of
    phi^-1 and zero blocks for the constraints, so that C^-1 G == 0.
    Only ``solve`` is meaningful; ``model`` is the unpadded covariance.
    """

    def __init__(self, model: FactorModel, constraints: ConstraintSet):
        if constraints.g.shape[0] != model.n:
            raise ValidationError("constraint matrix has the wrong number of rows")
        self.model = model
        self.constraints = constraints
        self.loadings = np.hstack([model.loadings, constraints.g])
        k, m = model.k, constraints.m
        self.varphi = np.zeros((k + m, k + m))
        self.varphi[:k, :k] = model.phi_inv

    @property
    def n(self):
        return self.model.n

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        z = 1.0 / self.model.xi2[idx]
        zx = (z * x[idx].T).T
        if self.loadings.shape[1] == 0:
            return _scatter(self.n, idx, zx)
        om = self.loadings[idx]
        q = self.varphi + (om * z[:, None]).T @ om
        cond = np.linalg.cond(q)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NumericalError("padded Q matrix is rank deficient", condition=float(cond))
        corr = om @ np.linalg.solve(q, om.T @ zx)
        return _scatter(self.n, idx, zx - (z * corr.T).T)


class ProjectedInverse:
    """Constraint-annihilating inverse for any RiskModel.

    S(x) - S(G) (G^T S(G))^-1 G^T S(x) with S the restricted inverse; used
    for dense models and as an independent check of the padded form.
    """

    def __init__(self, model: RiskModel, constraints: ConstraintSet):
        if constraints.g.shape[0] != model.n:
            raise ValidationError("constraint matrix has the wrong number of rows")
        self.model = model
        self.constraints = constraints

    @property
    def n(self):
        return self.model.n

    def solve(self, x, active=None):
        x = np.asarray(x, dtype=float)
        idx = _active_index(self.n, active)
        sx = self.model.solve(x, idx)
        if self.constraints.m == 0:
            return sx
        g = np.zeros_like(self.constraints.g)
        g[idx] = self.constraints.g[idx]
        sg = self.model.solve(g, idx)
        gram = g.T @ sg
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise NumericalError("constraints are degenerate on the active set", condition=float(cond))
        return sx - sg @ np.linalg.solve(gram, g.T @ sx)


def pad_with_constraints(model: RiskModel, constraints: ConstraintSet):
    """Inverse operator whose output satisfies every constraint column.

    Factor models (including statistical and positive-rho uniform models)
    use the padded Woodbury form; anything else uses the projected inverse.
    """
    if isinstance(model, StatisticalModel):
        model = model.factor_model
    if isinstance(model, FactorModel):
        return PaddedFactorModel(model, constraints)
    return ProjectedInverse(model, constraints)


def uniform_correlation_inverse_weights(model: UniformCorrelationModel, e) -> np.ndarray:
    """Sharpe weights C^-1 E under uniform correlation, normalized to sum 1."""
    e = np.asarray(getattr(e, "values", e), dtype=float)
    if e.shape != (model.n,):
        raise ValidationError("expected returns have the wrong length")
    et = e / model.sigma
    n, rho = model.n, model.rho
    raw = (et - rho / (1.0 + (n - 1) * rho) * et.sum()) / (model.sigma * (1.0 - rho))
    total = raw.sum()
    if abs(total) <= 1e-300:
        raise NumericalError("weights sum to zero; cannot normalize")
    return raw / total


def uniform_correlation_decomposition(psi) -> tuple[float, np.ndarray]:
    """Split a correlation matrix into the uniform part and a remainder.

    Returns ``(rho, delta)`` with rho the average off-diagonal correlation
    and delta = Psi - [(1 - rho) I + rho 1 1^T], whose entries sum to zero.
    """
    psi = np.asarray(psi, dtype=float)
    n = psi.shape[0]
    if n < 2:
        raise ValidationError("need N >= 2")
    rho = (psi.sum() - np.trace(psi)) / (n * (n - 1))
    uniform = (1.0 - rho) * np.eye(n) + rho
    return float(rho), psi - uniform


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

def _fmt(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def write_risk_model(path, model, kind: str | None = None) -> Path:
    """Write a factor-form model to the versioned flat text format."""
    if isinstance(model, StatisticalModel):
        kind = kind or "statistical"
        model = model.factor_model
    elif isinstance(model, DiagonalCovariance):
        kind = kind or "diagonal"
        model = build_factor_model(model.variances)
    elif isinstance(model, UniformCorrelationModel):
        kind = kind or "uniform"
        model = model.to_factor_model()
    if not isinstance(model, FactorModel):
        raise ValidationError("only factor-form models can be serialized")
    kind = kind or "factor"
    lines = [f"meanrisk-riskmodel {FORMAT_VERSION}", f"{model.n} {model.k} {kind}", "xi2", _fmt(model.xi2), "loadings"]
    lines += [_fmt(row) for row in model.loadings]
    lines.append("factor_cov")
    lines += [_fmt(row) for row in model.factor_cov]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_risk_model(path) -> tuple[FactorModel, str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    try:
        magic, version = lines[0].split()
        if magic != "meanrisk-riskmodel":
            raise ValueError("bad magic")
        if int(version) != FORMAT_VERSION:
            raise ValueError(f"unsupported version {version}")
        n_s, k_s, kind = lines[1].split()
        n, k = int(n_s), int(k_s)
        pos = 2
        if lines[pos] != "xi2":
            raise ValueError("missing xi2 section")
        xi2 = np.array(lines[pos + 1].split(), dtype=float)
        pos += 2
        if lines[pos] != "loadings":
            raise ValueError("missing loadings section")
        pos += 1
        om = np.array([ln.split() for ln in lines[pos : pos + n]], dtype=float).reshape(n, k) if k else np.zeros((n, 0))
        pos += n if k else 0
        if lines[pos] != "factor_cov":
            raise ValueError("missing factor_cov section")
        phi = np.array([ln.split() for ln in lines[pos + 1 : pos + 1 + k]], dtype=float).reshape(k, k)
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed risk model file: {exc}") from exc
    if xi2.size != n:
        raise ValidationError(f"{path}: xi2 has {xi2.size} entries, header says {n}")
    return FactorModel(xi2, om, phi), kind


def read_constraints_csv(path, tickers=None) -> ConstraintSet:
    rows, cols, g = read_matrix_csv(path)
    if tickers is not None and list(tickers) != rows:
        raise ValidationError(f"{path}: constraint rows do not match the universe tickers")
    return ConstraintSet(g, tuple(cols))
