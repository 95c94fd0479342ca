"""Maximization of mean-to-risk ratios G = E / f(V) with sum(w) = 1.

Without bounds the optimum always lies on the two-parameter family
``w = a C^-1 E + b C^-1 1``.  Writing ``alpha^2 = E'C^-1E``,
``beta^2 = 1'C^-1 1`` and ``gamma = E'C^-1 1``, the budget constraint reads
``a gamma + b beta^2 = 1`` and the stationarity conditions reduce to one
scalar equation in the portfolio variance V:

    gamma^2 (V beta^2 - 1) / (alpha^2 beta^2 - gamma^2)
        = (1 + beta^2 [f(V) / 2 f'(V) - V])^2

Sharpe (f = sqrt V) and Fano (f = V) have closed forms; f = V^p and
f = exp(xi V) make the equation quadratic; anything else is solved by
bracketed root finding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .errors import DegenerateSolutionError, InfeasibleError, NumericalError, ValidationError
from .risk_models import RiskModel, as_risk_model

__all__ = [
    "RatioSpec",
    "ScalarInvariants",
    "OptimizerSolution",
    "PortfolioStats",
    "scalar_invariants",
    "maximize_sharpe",
    "maximize_fano",
    "maximize_general",
    "maximize",
    "evaluate_portfolio",
    "stationarity_residual",
]

_BUDGET_TOL = 1e-8
_COLINEAR_TOL = 1e-12


@dataclass(frozen=True)
class RatioSpec:
    """Which ratio E / f(V) to maximize.

    Use the constructors :meth:`sharpe`, :meth:`fano`, :meth:`power`,
    :meth:`exp` and :meth:`custom` rather than building one by hand.
    """

    kind: str
    p: float | None = None
    xi: float | None = None
    f: Callable[[float], float] | None = field(default=None, compare=False)
    f_prime: Callable[[float], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("sharpe", "fano", "power", "exp", "custom"):
            raise ValidationError(f"unknown ratio kind {self.kind!r}")
        if self.kind == "power" and not (self.p is not None and self.p > 0):
            raise ValidationError("power ratio needs p > 0")
        if self.kind == "exp" and not (self.xi is not None and self.xi > 0):
            raise ValidationError("exp ratio needs xi > 0 so that f is increasing")
        if self.kind == "custom":
            if self.f is None or self.f_prime is None:
                raise ValidationError("custom ratio needs f and f_prime")
            for v in np.geomspace(1e-8, 1e4, 25):
                fv, fp = self.f(float(v)), self.f_prime(float(v))
                if not (np.isfinite(fv) and np.isfinite(fp) and fv > 0 and fp > 0):
                    raise ValidationError(f"custom f must satisfy f > 0, f' > 0 (fails at V = {v:.3g})")

    @classmethod
    def sharpe(cls):
        return cls("sharpe")

    @classmethod
    def fano(cls):
        return cls("fano")

    @classmethod
    def power(cls, p: float):
        return cls("power", p=float(p))

    @classmethod
    def exp(cls, xi: float):
        return cls("exp", xi=float(xi))

    @classmethod
    def custom(cls, f, f_prime):
        return cls("custom", f=f, f_prime=f_prime)

    @property
    def label(self) -> str:
        if self.kind == "power":
            return f"power(p={self.p:g})"
        if self.kind == "exp":
            return f"exp(xi={self.xi:g})"
        return self.kind

    def value(self, v):
        if self.kind == "sharpe":
            return np.sqrt(v)
        if self.kind == "fano":
            return v
        if self.kind == "power":
            return np.power(v, self.p)
        if self.kind == "exp":
            with np.errstate(over="ignore"):  # inf is the right limit here
                return np.exp(self.xi * v)
        return self.f(v)

    def derivative(self, v):
        if self.kind == "sharpe":
            return 0.5 / np.sqrt(v)
        if self.kind == "fano":
            return np.ones_like(np.asarray(v, dtype=float))
        if self.kind == "power":
            return self.p * np.power(v, self.p - 1.0)
        if self.kind == "exp":
            with np.errstate(over="ignore"):
                return self.xi * np.exp(self.xi * v)
        return self.f_prime(v)

    def half_ratio(self, v):
        """f(V) / (2 f'(V))."""
        affine = self.affine_half_ratio()
        if affine is not None:
            slope, intercept = affine
            return slope * v + intercept
        return self.value(v) / (2.0 * self.derivative(v))

    def affine_half_ratio(self) -> tuple[float, float] | None:
        """(slope, intercept) when f / 2f' is affine in V, else None."""
        if self.kind == "sharpe":
            return 1.0, 0.0
        if self.kind == "fano":
            return 0.5, 0.0
        if self.kind == "power":
            return 0.5 / self.p, 0.0
        if self.kind == "exp":
            return 0.0, 0.5 / self.xi
        return None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.p is not None:
            d["p"] = self.p
        if self.xi is not None:
            d["xi"] = self.xi
        return d


@dataclass(frozen=True)
class ScalarInvariants:
    alpha2: float
    beta2: float
    gamma: float

    @property
    def alpha(self) -> float:
        return math.sqrt(self.alpha2)

    @property
    def beta(self) -> float:
        return math.sqrt(self.beta2)

    @property
    def discriminant(self) -> float:
        """alpha^2 beta^2 - gamma^2 (>= 0 by Cauchy-Schwarz)."""
        return self.alpha2 * self.beta2 - self.gamma**2

    def to_dict(self):
        return {"alpha2": self.alpha2, "beta2": self.beta2, "gamma": self.gamma}


@dataclass
class OptimizerSolution:
    weights: np.ndarray
    a: float
    b: float
    e_port: float
    v_port: float
    sharpe: float
    fano: float
    mu: float
    spec: RatioSpec
    invariants: ScalarInvariants
    diagnostics: dict = field(default_factory=dict)

    @property
    def kappa(self) -> float:
        return 2.0 * self.fano

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "weights": self.weights.tolist(),
            "a": self.a,
            "b": self.b,
            "E": self.e_port,
            "V": self.v_port,
            "S": self.sharpe,
            "F": self.fano,
            "kappa": self.kappa,
            "mu": self.mu,
            "invariants": self.invariants.to_dict(),
            "diagnostics": _jsonable(self.diagnostics),
        }


@dataclass(frozen=True)
class PortfolioStats:
    E: float
    V: float
    S: float
    F: float
    kappa: float

    @property
    def bubble(self) -> bool:
        """kappa < 1: a poor long-run holding under log-normal dynamics."""
        return self.kappa < 1.0

    def to_dict(self):
        return {"E": self.E, "V": self.V, "S": self.S, "F": self.F, "kappa": self.kappa, "bubble": self.bubble}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _values(e) -> np.ndarray:
    return np.asarray(getattr(e, "values", e), dtype=float)


def _prepare(model, e, active):
    model = as_risk_model(model)
    e = _values(e)
    if e.shape != (model.n,):
        raise ValidationError(f"expected returns have length {e.shape}, model has N = {model.n}")
    if active is not None:
        active = np.asarray(active)
        if active.dtype == bool:
            active = np.flatnonzero(active)
        mask = np.zeros(model.n, dtype=bool)
        mask[active] = True
        e = np.where(mask, e, 0.0)
        nu = mask.astype(float)
    else:
        nu = np.ones(model.n)
    return model, e, nu, active


def _solve_pair(model: RiskModel, e, nu, active):
    sol = model.solve(np.column_stack([e, nu]), active)
    return sol[:, 0], sol[:, 1]


def scalar_invariants(model, e, active=None) -> ScalarInvariants:
    """alpha^2 = E'C^-1E, beta^2 = 1'C^-1 1, gamma = E'C^-1 1 (on ``active`` when given)."""
    inv, _, _ = _invariants(model, e, active)
    return inv


def _invariants(model, e, active=None):
    model, e, nu, active = _prepare(model, e, active)
    eta, nu_hat = _solve_pair(model, e, nu, active)
    alpha2 = float(e @ eta)
    beta2 = float(nu @ nu_hat)
    gamma = 0.5 * float(nu @ eta + e @ nu_hat)
    if not (alpha2 > 0 and beta2 > 0):
        if alpha2 == 0 and beta2 > 0:
            raise DegenerateSolutionError("expected returns vanish on the active set")
        raise NumericalError("covariance is not numerically positive definite (alpha^2 or beta^2 <= 0)")
    if gamma**2 > alpha2 * beta2 * (1.0 + 1e-9):
        raise NumericalError("Cauchy-Schwarz violated: covariance is not numerically positive definite",
                             condition=gamma**2 / (alpha2 * beta2))
    return ScalarInvariants(alpha2, beta2, gamma), eta, nu_hat


def evaluate_portfolio(weights, model, e) -> PortfolioStats:
    """E = w'E, V = w'Cw, S = E / sqrt V, F = E / V, kappa = 2F."""
    model = as_risk_model(model)
    w = np.asarray(weights, dtype=float)
    e = _values(e)
    if w.shape != (model.n,) or e.shape != (model.n,):
        raise ValidationError("weights and expected returns must have length N")
    big_e = float(w @ e)
    big_v = float(w @ model.matvec(w))
    if not big_v > 0:
        raise DegenerateSolutionError("portfolio variance is zero; ratios undefined")
    f = big_e / big_v
    return PortfolioStats(big_e, big_v, big_e / math.sqrt(big_v), f, 2.0 * f)


def _gradient(model, e, w, spec: RatioSpec, active):
    """dG/dw_i on the active set (zeros elsewhere)."""
    big_e = float(w @ e)
    big_v = float(w @ model.matvec(w))
    f = float(spec.value(big_v))
    fp = float(spec.derivative(big_v))
    grad = e / f - big_e * fp / f**2 * 2.0 * model.matvec(w)
    if active is not None:
        mask = np.zeros(model.n, dtype=bool)
        mask[active] = True
        grad = np.where(mask, grad, 0.0)
    return grad


def stationarity_residual(solution: OptimizerSolution, model, e, active=None) -> float:
    """max_i |dG/dw_i + mu| over the active set, with the solution's mu."""
    model, e, nu, active = _prepare(model, e, active)
    grad = _gradient(model, e, solution.weights, solution.spec, active)
    return float(np.max(np.abs(grad + solution.mu * nu)))


def _finish(model, e, nu, active, w, a, b, spec, inv, diagnostics=None) -> OptimizerSolution:
    big_e = float(w @ e)
    big_v = float(w @ model.matvec(w))
    grad = _gradient(model, e, w, spec, active)
    n_active = nu.sum()
    mu = -float(grad @ nu) / n_active
    diagnostics = dict(diagnostics or {})
    diagnostics["stationarity"] = float(np.max(np.abs(grad + mu * nu)))
    if active is not None:
        diagnostics["active"] = np.asarray(active).tolist()
    return OptimizerSolution(
        weights=w,
        a=float(a),
        b=float(b),
        e_port=big_e,
        v_port=big_v,
        sharpe=big_e / math.sqrt(big_v),
        fano=big_e / big_v,
        mu=mu,
        spec=spec,
        invariants=inv,
        diagnostics=diagnostics,
    )


def maximize_sharpe(model, e, active=None) -> OptimizerSolution:
    """w = C^-1 E / gamma (b = 0, a = 1 / gamma); S = alpha, F = gamma when gamma > 0."""
    model, e, nu, active = _prepare(model, e, active)
    inv, eta, _ = _invariants(model, e, active)
    if abs(inv.gamma) <= 1e-14 * inv.alpha * inv.beta:
        raise DegenerateSolutionError("gamma = 0: expected returns are orthogonal to the budget direction")
    a = 1.0 / inv.gamma
    return _finish(model, e, nu, active, a * eta, a, 0.0, RatioSpec.sharpe(), inv)


def maximize_fano(model, e, active=None) -> OptimizerSolution:
    """Closed-form Fano optimum.

    a = 1 / (alpha beta + gamma), b = alpha / (beta (alpha beta + gamma));
    E = alpha / beta, V = 2 alpha / (beta (alpha beta + gamma)),
    F = (alpha beta + gamma) / 2.
    """
    model, e, nu, active = _prepare(model, e, active)
    inv, eta, nu_hat = _invariants(model, e, active)
    lam = inv.alpha * inv.beta + inv.gamma
    if not lam > 1e-14 * inv.alpha * inv.beta:
        raise InfeasibleError("alpha beta + gamma <= 0: no portfolio with positive Fano ratio")
    a = 1.0 / lam
    b = inv.alpha / (inv.beta * lam)
    sol = _finish(model, e, nu, active, a * eta + b * nu_hat, a, b, RatioSpec.fano(), inv)
    sol.diagnostics["lambda"] = lam
    sol.diagnostics["closed_form"] = {
        "E": inv.alpha / inv.beta,
        "V": 2.0 * inv.alpha / (inv.beta * lam),
        "F": 0.5 * lam,
        "S": math.sqrt(inv.alpha * lam / (2.0 * inv.beta)),
    }
    return sol


def _variance_equation(inv: ScalarInvariants, spec: RatioSpec):
    d = inv.discriminant

    def residual(v):
        b = v - spec.half_ratio(v)
        return inv.gamma**2 * (v * inv.beta2 - 1.0) / d - (1.0 - inv.beta2 * b) ** 2

    return residual


def _quadratic_roots(inv: ScalarInvariants, slope: float, intercept: float) -> list[float]:
    # b(V) = c1 V + c0 with c1 = 1 - slope, c0 = -intercept
    c1, c0 = 1.0 - slope, -intercept
    d = inv.discriminant
    beta2, g2 = inv.beta2, inv.gamma**2
    k0 = 1.0 - beta2 * c0
    qa = beta2**2 * c1**2
    qb = -(2.0 * k0 * beta2 * c1 + g2 * beta2 / d)
    qc = k0**2 + g2 / d
    if abs(qa) <= 1e-15 * (abs(qb) / max(1.0 / beta2, 1e-300)):
        return [-qc / qb] if qb != 0 else []
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        if disc > -1e-12 * qb * qb:
            disc = 0.0
        else:
            raise NumericalError("variance equation has complex roots; no stationary point")
    sq = math.sqrt(disc)
    # numerically stable pair
    q = -0.5 * (qb + math.copysign(sq, qb))
    roots = [q / qa]
    if q != 0:
        roots.append(qc / q)
    return sorted(roots)


def _bracketed_roots(inv: ScalarInvariants, spec: RatioSpec) -> list[float]:
    residual = _variance_equation(inv, spec)
    v_lo = 1.0 / inv.beta2
    grid = v_lo * np.geomspace(1.0 + 1e-12, 1e6, 800)
    vals = np.array([residual(float(v)) for v in grid])
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        root = optimize.brentq(residual, grid[i], grid[i + 1], xtol=1e-300, rtol=4 * np.finfo(float).eps,
                               maxiter=500)
        roots.append(float(root))
    roots += [float(v) for v, r in zip(grid, vals) if r == 0.0]
    return sorted(roots)


def maximize_general(model, e, spec: RatioSpec, active=None) -> OptimizerSolution:
    """Maximize E / f(V) over sum(w) = 1 by solving the scalar variance equation.

    Every admissible root (V beta^2 >= 1) is tried with both signs of a;
    candidates that violate the budget a gamma + b beta^2 = 1 are dropped
    and the one with the largest G is returned.  Rejected candidates are
    listed in ``diagnostics["rejected"]``.
    """
    model, e, nu, active = _prepare(model, e, active)
    inv, eta, nu_hat = _invariants(model, e, active)
    if inv.discriminant <= _COLINEAR_TOL * inv.alpha2 * inv.beta2:
        # E proportional to the unit vector: every ratio picks the minimum-variance portfolio
        w = nu_hat / inv.beta2
        sol = _finish(model, e, nu, active, w, 0.0, 1.0 / inv.beta2, spec, inv, {"colinear": True})
        return sol
    if not inv.alpha * inv.beta + inv.gamma > 0:
        raise InfeasibleError("alpha beta + gamma <= 0: no portfolio with positive expected return")

    affine = spec.affine_half_ratio()
    if affine is not None:
        roots = _quadratic_roots(inv, *affine)
        method = "quadratic"
    else:
        roots = _bracketed_roots(inv, spec)
        method = "bracketed"
    if not roots:
        raise NumericalError(f"no root of the variance equation in [1/beta^2, 1e6/beta^2] for {spec.label}")

    candidates, rejected = [], []
    for v in roots:
        excess = v * inv.beta2 - 1.0
        if excess < -1e-12:
            rejected.append({"V": v, "reason": "V beta^2 < 1"})
            continue
        a_abs = math.sqrt(max(excess, 0.0) / inv.discriminant)
        b = v - float(spec.half_ratio(v))
        for a in (a_abs, -a_abs) if a_abs > 0 else (0.0,):
            budget = a * inv.gamma + b * inv.beta2
            if abs(budget - 1.0) > _BUDGET_TOL * (1.0 + abs(a * inv.gamma) + abs(b * inv.beta2)):
                rejected.append({"V": v, "a": a, "reason": "budget violated"})
                continue
            w = a * eta + b * nu_hat
            big_v = float(w @ model.matvec(w))
            big_e = float(w @ e)
            if not big_v > 0:
                continue
            g = big_e / float(spec.value(big_v))
            candidates.append((g, v, a, b, w))
    if not candidates:
        raise NumericalError(f"no root of the variance equation satisfies the budget for {spec.label}")
    candidates.sort(key=lambda c: c[0], reverse=True)
    g, v, a, b, w = candidates[0]
    for other in candidates[1:]:
        rejected.append({"V": other[1], "a": other[2], "G": other[0], "reason": "lower G"})
    diag = {"method": method, "V_root": v, "roots": roots, "G": g, "rejected": rejected}
    return _finish(model, e, nu, active, w, a, b, spec, inv, diag)


def maximize(model, e, spec: RatioSpec, active=None) -> OptimizerSolution:
    """Dispatch to the closed forms for Sharpe and Fano, else :func:`maximize_general`."""
    if spec.kind == "sharpe":
        return maximize_sharpe(model, e, active)
    if spec.kind == "fano":
        return maximize_fano(model, e, active)
    return maximize_general(model, e, spec, active)
