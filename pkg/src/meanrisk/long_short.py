"""Long-short weights: multiply-optimized series, sign fixed point, bounds.

The multiply-optimized portfolio replaces E by the truncated series

    E_hat = sum_{p=1..n_opt} (b_hat h)^(p-1) E^(p),   E^(p+1) = C^-1 E^(p),

with h^2 = (E . E^(2)) / (E^(2) . E^(3)) making b_hat dimensionless, and
then sets w = a C^-1 E_hat normalized to sum |w_i| = 1.  Linear
homogeneous constraints (dollar neutrality and friends) enter only through
the final inverse, which is padded so that C^-1 G = 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateSolutionError, InfeasibleError, NumericalError, ValidationError
from .market_data import read_kv_file
from .ratio_optimizer import _values
from .risk_models import (
    ConstraintSet,
    FactorModel,
    RiskModel,
    StatisticalModel,
    as_risk_model,
    pad_with_constraints,
    read_constraints_csv,
)

log = logging.getLogger(__name__)

__all__ = [
    "MultiOptSpec",
    "IteratedReturns",
    "iterated_returns",
    "series_returns",
    "multiply_optimized_weights",
    "rescaling_check",
    "linearized_weights",
    "tanh_step",
    "tanh_fixed_point",
    "FixedPointResult",
    "regression_limit_weights",
    "apply_position_bounds",
    "BoundedResult",
    "normalize_gross",
    "StrategyConfig",
    "load_strategy_config",
]


@dataclass(frozen=True, eq=False)
class MultiOptSpec:
    n_opt: int = 1
    b_hat: float = 1.0
    constraints: ConstraintSet | None = None
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if isinstance(self.n_opt, bool) or int(self.n_opt) != self.n_opt or self.n_opt < 1:
            raise ValidationError(f"n_opt must be a positive integer, got {self.n_opt!r}")
        object.__setattr__(self, "n_opt", int(self.n_opt))
        if not math.isfinite(self.b_hat):
            raise ValidationError("b_hat must be finite")
        if self.bounds is not None:
            lo, hi = (np.asarray(x, dtype=float) for x in self.bounds)
            _check_bounds(lo, hi)
            object.__setattr__(self, "bounds", (lo, hi))


@dataclass
class IteratedReturns:
    levels: list[np.ndarray]
    h: float


def _check_bounds(lo, hi, n=None):
    if lo.shape != hi.shape or lo.ndim != 1 or (n is not None and lo.size != n):
        raise ValidationError("bounds must be two N-vectors")
    if not (np.all(lo < 0) and np.all(hi > 0)):
        raise ValidationError("bounds must straddle zero: lower < 0 < upper")


def normalize_gross(w) -> np.ndarray:
    """Scale so that sum |w_i| = 1."""
    w = np.asarray(w, dtype=float)
    gross = np.abs(w).sum()
    if not gross > 0 or not math.isfinite(gross):
        raise DegenerateSolutionError("weights vanish; cannot normalize")
    return w / gross


def iterated_returns(model, e, n_opt: int) -> IteratedReturns:
    """E^(1) .. E^(n_opt) and the scale h (h = 1 when n_opt == 1)."""
    model = as_risk_model(model)
    e = _values(e)
    if e.shape != (model.n,):
        raise ValidationError("expected returns have the wrong length")
    if not np.any(e):
        raise DegenerateSolutionError("expected returns are identically zero")
    levels = [e]
    depth = max(n_opt, 3) if n_opt > 1 else 1
    for _ in range(depth - 1):
        levels.append(model.solve(levels[-1]))
    if n_opt == 1:
        return IteratedReturns(levels, 1.0)
    num = float(levels[0] @ levels[1])
    den = float(levels[1] @ levels[2])
    if not (num > 0 and den > 0):
        raise DegenerateSolutionError("h is undefined: E^(2) vanishes")
    return IteratedReturns(levels[:n_opt], math.sqrt(num / den))


def series_returns(model, e, n_opt: int, b_hat: float = 1.0) -> tuple[np.ndarray, IteratedReturns]:
    it = iterated_returns(model, e, n_opt)
    coef = b_hat * it.h
    e_hat = sum(coef**p * lvl for p, lvl in enumerate(it.levels))
    return np.asarray(e_hat, dtype=float), it


def multiply_optimized_weights(model, e, spec: MultiOptSpec) -> np.ndarray:
    """Normalized weights w proportional to C^-1 E_hat (padded when constrained)."""
    model = as_risk_model(model)
    e_hat, _ = series_returns(model, e, spec.n_opt, spec.b_hat)
    if spec.bounds is not None:
        return apply_position_bounds(e_hat, model, spec.bounds, spec.constraints).weights
    if spec.constraints is not None and spec.constraints.m:
        raw = pad_with_constraints(model, spec.constraints).solve(e_hat)
    else:
        raw = model.solve(e_hat)
    return normalize_gross(raw)


def rescaling_check(model, e, spec: MultiOptSpec, pairs=((3.0, 1.0), (1.0, 7.0), (0.2, 5.0)),
                    tol: float = 1e-10) -> dict:
    """Recompute weights under E -> zeta E, C -> lam C and report the deviation."""
    model = as_risk_model(model)
    e = _values(e)
    base = multiply_optimized_weights(model, e, spec)
    rows = []
    for zeta, lam in pairs:
        w = multiply_optimized_weights(model.scaled(lam), zeta * e, spec)
        rows.append({"zeta": zeta, "lambda": lam, "max_abs_dev": float(np.abs(w - base).max())})
    worst = max(r["max_abs_dev"] for r in rows)
    return {"n_opt": spec.n_opt, "b_hat": spec.b_hat, "tol": tol, "cases": rows,
            "max_abs_dev": worst, "invariant": worst <= tol}


# ----------------------------------------------------------------------
# linearized and smoothed-sign formulations
# ----------------------------------------------------------------------

def linearized_weights(model, e, b_tilde: float, a: float = 1.0, n_series: int = 5) -> np.ndarray:
    """Solve (C - b_tilde I) w = a E; unnormalized.

    If C - b_tilde I is not positive definite, fall back to the truncated
    series a sum_p b_tilde^(p-1) C^-p E with a warning.
    """
    model = as_risk_model(model)
    e = _values(e)
    if isinstance(model, StatisticalModel):
        model = model.factor_model
    if isinstance(model, FactorModel) and np.all(model.xi2 > b_tilde):
        return a * model.shifted(b_tilde).solve(e)
    dense = model.to_dense() - b_tilde * np.eye(model.n)
    lo = np.linalg.eigvalsh(dense).min()
    if lo > 1e-12 * np.abs(dense).max():
        return a * np.linalg.solve(dense, e)
    log.warning("C - b I is indefinite (min eigenvalue %.3e); using the truncated series", lo)
    out = np.zeros_like(e)
    term = model.solve(e)
    for p in range(n_series):
        out += b_tilde**p * term
        term = model.solve(term)
    return a * out


def _fano_coefficients(model: RiskModel, e, chi):
    sol = model.solve(np.column_stack([e, chi]))
    alpha2 = float(e @ sol[:, 0])
    beta2 = float(chi @ sol[:, 1])
    gamma = 0.5 * float(chi @ sol[:, 0] + e @ sol[:, 1])
    if not (alpha2 > 0 and beta2 > 0):
        raise DegenerateSolutionError("smoothed signs or returns vanish")
    alpha, beta = math.sqrt(alpha2), math.sqrt(beta2)
    lam = alpha * beta + gamma
    if lam <= 0:
        raise InfeasibleError("alpha beta + gamma <= 0 for the smoothed signs")
    return 1.0 / lam, alpha / (beta * lam), sol


def tanh_step(model, e, w, delta, a=None, b=None) -> np.ndarray:
    """One pass w -> C^-1 [a E + b tanh(w / delta)]; a, b default to the Fano values."""
    model = as_risk_model(model)
    e = _values(e)
    chi = np.tanh(np.asarray(w, dtype=float) / delta)
    if a is None or b is None:
        a_f, b_f, sol = _fano_coefficients(model, e, chi)
        a = a_f if a is None else a
        b = b_f if b is None else b
        return a * sol[:, 0] + b * sol[:, 1]
    return model.solve(a * e + b * chi)


@dataclass
class FixedPointResult:
    weights: np.ndarray
    converged: bool
    iterations: int
    changes: list[float] = field(default_factory=list)
    sign_flips: int = 0
    zero_weights: int = 0

    def to_dict(self):
        return {"weights": self.weights.tolist(), "converged": self.converged, "iterations": self.iterations,
                "changes": self.changes, "sign_flips": self.sign_flips, "zero_weights": self.zero_weights}


def tanh_fixed_point(model, e, delta, max_iter: int = 100, tol: float = 1e-10,
                     damping: float = 0.5) -> FixedPointResult:
    """Iterate the smoothed-sign equation from the Sharpe starting point.

    ``damping`` mixes the previous iterate back in (0 is the plain
    iteration).  Non-convergence is returned as a flag, not raised: the
    signs of small weights can oscillate indefinitely.
    """
    model = as_risk_model(model)
    e = _values(e)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), e.shape)
    if not np.all(delta > 0) or not np.all(np.isfinite(delta)):
        raise ValidationError("delta must be positive and finite")
    if not 0.0 <= damping < 1.0:
        raise ValidationError("damping must lie in [0, 1)")
    w = normalize_gross(model.solve(e))
    changes: list[float] = []
    flips = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = normalize_gross(tanh_step(model, e, w, delta))
        if damping:
            new = normalize_gross((1.0 - damping) * new + damping * w)
        flips = int(np.sum(np.sign(new) != np.sign(w)))
        change = float(np.abs(new - w).max())
        changes.append(change)
        w = new
        if change < tol:
            converged = True
            break
    zeros = int(np.sum(w == 0))
    if zeros:
        log.warning("%d weights are exactly zero; their signs are undefined", zeros)
    return FixedPointResult(w, converged, it, changes, flips, zeros)


# ----------------------------------------------------------------------
# regression limit
# ----------------------------------------------------------------------

def regression_limit_weights(model, e, theta: float) -> np.ndarray:
    """Weights from C - theta diag(xi^2); theta = 1 gives regression residuals.

    At theta = 1 the weights are eps_i / xi_i^2 with eps the residuals of
    a cross-sectional regression of E on the loadings, weights 1 / xi^2.
    """
    if isinstance(model, StatisticalModel):
        model = model.factor_model
    if not isinstance(model, FactorModel):
        raise ValidationError("the regression limit needs a factor model")
    e = _values(e)
    theta = float(theta)
    if not 0.0 <= theta <= 1.0:
        raise ValidationError("theta must lie in [0, 1]")
    if theta < 1.0:
        try:
            shifted = model.shifted(theta * model.xi2)
            raw = shifted.solve(e)
        except NumericalError:
            raise
        except Exception as exc:  # ModelError from tiny specific variances
            raise NumericalError(f"shifted covariance is singular at theta = {theta}") from exc
        return normalize_gross(raw)
    z = 1.0 / model.xi2
    om = model.loadings
    if om.shape[1] == 0:
        resid = e
    else:
        sw = np.sqrt(z)
        coef, *_ = np.linalg.lstsq(om * sw[:, None], e * sw, rcond=None)
        resid = e - om @ coef
    return normalize_gross(resid * z)


# ----------------------------------------------------------------------
# position bounds
# ----------------------------------------------------------------------

@dataclass
class BoundedResult:
    weights: np.ndarray
    at_lower: np.ndarray
    at_upper: np.ndarray
    scale: float
    iterations: int
    kkt_residual: float
    gross: float


def _free_solution(model: RiskModel, e_hat, free, w_fixed, g):
    """w_F = a u + v solving the stationarity conditions on the free set."""
    n = model.n
    mask = np.zeros(n, dtype=bool)
    mask[free] = True
    coupling = model.matvec(w_fixed)
    rhs = np.column_stack([np.where(mask, e_hat, 0.0), np.where(mask, -coupling, 0.0)])
    s = model.solve(rhs, free)
    u, v = s[:, 0], s[:, 1]
    if g is not None and g.shape[1]:
        gf = np.where(mask[:, None], g, 0.0)
        sg = model.solve(gf, free)
        gram = gf.T @ sg
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError("constraints are degenerate on the free set", condition=float(cond))
        target = -(g.T @ w_fixed)
        u = u - sg @ np.linalg.solve(gram, gf.T @ u)
        v = v - sg @ np.linalg.solve(gram, gf.T @ v - target)
    return u, v


def _scale_for_unit_gross(u, v, fixed_gross):
    """Largest a >= 0 with sum |a u + v| + fixed_gross = 1.

    The gross exposure is convex and piecewise linear in a, so its minimum
    over a >= 0 sits at zero or at a breakpoint -v_i / u_i; the root to the
    right of that minimum is the one on the return-seeking branch.
    """
    def excess(a):
        return np.abs(a * u + v).sum() + fixed_gross - 1.0

    slope = np.abs(u).sum()
    if slope <= 0:
        raise DegenerateSolutionError("no free direction to scale")
    nz = u != 0
    kinks = -v[nz] / u[nz]
    cand = np.concatenate([[0.0], kinks[kinks > 0]])
    vals = np.abs(np.outer(cand, u) + v).sum(1)
    lo = float(cand[int(np.argmin(vals))])
    if excess(lo) >= 0:
        raise InfeasibleError("bounded positions alone exhaust the gross budget")
    hi = max(lo, 0.0) + (1.0 + np.abs(v).sum()) / slope
    while excess(hi) < 0:
        hi *= 2.0
    return brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)


def apply_position_bounds(e_hat, model, bounds, constraints: ConstraintSet | None = None,
                          max_iter: int = 100) -> BoundedResult:
    """Maximize a E_hat.w - w'Cw/2 within lower <= w <= upper, sum |w| = 1.

    Coordinates that violate a bound are fixed at it and the rest are
    re-solved; fixed coordinates whose multiplier has the wrong sign are
    released.  The scale a > 0 is re-solved every pass to keep the gross
    exposure at one.
    """
    model = as_risk_model(model)
    e_hat = _values(e_hat)
    n = model.n
    lo, hi = (np.asarray(x, dtype=float) for x in bounds)
    lo = np.broadcast_to(lo, (n,)).copy()
    hi = np.broadcast_to(hi, (n,)).copy()
    _check_bounds(lo, hi, n)
    capacity = float(np.maximum(-lo, hi).sum())
    if capacity <= 1.0:
        raise InfeasibleError(f"position bounds allow a gross exposure of only {capacity:.4g} < 1")
    g = constraints.g if constraints is not None and constraints.m else None
    if g is not None and g.shape[0] != n:
        raise ValidationError("constraint matrix has the wrong number of rows")

    at_lo = np.zeros(n, dtype=bool)
    at_hi = np.zeros(n, dtype=bool)
    for it in range(1, max_iter + 1):
        fixed = at_lo | at_hi
        free = np.flatnonzero(~fixed)
        w_fixed = np.where(at_lo, lo, 0.0) + np.where(at_hi, hi, 0.0)
        if free.size == 0:
            raise InfeasibleError("every coordinate is at a bound")
        u, v = _free_solution(model, e_hat, free, w_fixed, g)
        a = _scale_for_unit_gross(u[free], v[free], np.abs(w_fixed).sum())
        w = w_fixed.copy()
        w[free] = a * u[free] + v[free]

        over = (~fixed) & (w > hi)
        under = (~fixed) & (w < lo)
        if over.any() or under.any():
            at_hi |= over
            at_lo |= under
            continue

        # multipliers of the fixed coordinates: r = a E_hat - C w (+ G lambda)
        r = a * e_hat - model.matvec(w)
        if g is not None:
            lam, *_ = np.linalg.lstsq(g[free], -r[free], rcond=None)
            r = r + g @ lam
        release = (at_hi & (r < 0)) | (at_lo & (r > 0))
        if release.any():
            at_hi &= ~release
            at_lo &= ~release
            continue
        kkt = float(np.abs(r[free]).max()) / max(1.0, float(np.abs(a * e_hat).max()))
        return BoundedResult(w, at_lo.copy(), at_hi.copy(), float(a), it, kkt, float(np.abs(w).sum()))
    raise NumericalError(f"bounded active set did not settle within {max_iter} iterations")


# ----------------------------------------------------------------------
# strategy configuration
# ----------------------------------------------------------------------

_STRATEGY_KEYS = {"n_opt", "b_hat", "constraints", "bounds_fraction", "ma_days", "risk_window",
                  "remove_market_mode"}


@dataclass(frozen=True)
class StrategyConfig:
    """Per-date multiply-optimized strategy settings.

    ``constraints`` is ``dollar_neutral``, ``none`` or a path to an N x m
    constraint CSV.  ``bounds_fraction`` caps |H_i| at that fraction of ADDV.
    """

    n_opt: int = 1
    b_hat: float = 1.0
    constraints: str = "dollar_neutral"
    bounds_fraction: float = 0.01
    ma_days: int = 5
    risk_window: int = 21
    remove_market_mode: bool = False

    def __post_init__(self):
        if self.n_opt < 1:
            raise ValidationError("n_opt must be >= 1")
        if not self.bounds_fraction > 0:
            raise ValidationError("bounds_fraction must be positive")
        if self.ma_days < 1 or self.risk_window < 2:
            raise ValidationError("ma_days >= 1 and risk_window >= 2 required")

    def constraint_set(self, n: int, tickers=None) -> ConstraintSet | None:
        if self.constraints == "none":
            return None
        if self.constraints == "dollar_neutral":
            return ConstraintSet.dollar_neutral(n)
        return read_constraints_csv(Path(self.constraints), tickers)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "StrategyConfig":
        unknown = set(mapping) - _STRATEGY_KEYS
        if unknown:
            raise ValidationError(f"unknown strategy keys: {', '.join(sorted(unknown))}")
        conv = {"n_opt": int, "b_hat": float, "constraints": str, "bounds_fraction": float,
                "ma_days": int, "risk_window": int, "remove_market_mode": _parse_bool}
        try:
            return cls(**{k: conv[k](v) for k, v in mapping.items()})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad strategy value: {exc}") from exc


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {v!r}")


def load_strategy_config(path) -> StrategyConfig:
    return StrategyConfig.from_mapping(read_kv_file(path))
