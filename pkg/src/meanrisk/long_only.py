"""Long-only portfolios via iterative relaxation of the unbounded optimum.

Starting from the full universe, the unbounded solution is computed on the
current active set J.  If any weight is negative, the negative-weight
instrument with the lowest single-stock Fano ratio E_i / C_ii is dropped
permanently (ties: larger C_ii, then lower index) and the solve repeats.
This is an approximation to the bounded optimum, not an exact QP solve;
with a factor model each pass costs only a K x K inversion.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSolutionError, InfeasibleError, ValidationError
from .market_data import VolatilityProfile
from .ratio_optimizer import (
    OptimizerSolution,
    RatioSpec,
    ScalarInvariants,
    _values,
    maximize,
    maximize_fano,
    scalar_invariants,
)
from .risk_models import DenseCovariance, FactorModel, RiskModel, as_risk_model

log = logging.getLogger(__name__)

__all__ = [
    "ActiveSet",
    "LongOnlySolution",
    "fano_long_only",
    "sharpe_long_only",
    "general_long_only",
    "diversification_report",
    "volatility_bound_report",
    "one_factor_demo",
    "OneFactorDemo",
]

_SNAP = 1e-12


@dataclass
class ActiveSet:
    included: list[int]
    excluded: list[tuple[int, int]] = field(default_factory=list)  # (index, iteration dropped)
    iterations: int = 0

    def to_dict(self):
        return {
            "included": list(self.included),
            "excluded": [{"index": i, "iteration": k} for i, k in self.excluded],
            "iterations": self.iterations,
        }


@dataclass
class LongOnlySolution:
    weights: np.ndarray
    active_set: ActiveSet
    effective_returns: np.ndarray
    scalars: ScalarInvariants
    spec: RatioSpec
    history: list[dict] = field(default_factory=list)
    restricted: OptimizerSolution | None = None

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "weights": self.weights.tolist(),
            "active_set": self.active_set.to_dict(),
            "effective_returns": self.effective_returns.tolist(),
            "scalars": self.scalars.to_dict(),
            "history": self.history,
        }


def _drop_choice(candidates, f_single, c_diag) -> int:
    return min(candidates, key=lambda i: (f_single[i], -c_diag[i], i))


def _relax(model: RiskModel, e: np.ndarray, unbounded, spec: RatioSpec) -> LongOnlySolution:
    """Shared relaxation loop; ``unbounded(J)`` returns (weights, solution)."""
    n = model.n
    c_diag = model.diag()
    f_single = e / c_diag
    active = list(range(n))
    excluded: list[tuple[int, int]] = []
    history: list[dict] = []
    k = 0
    while True:
        if not active:
            raise InfeasibleError("every instrument was dropped; no long-only portfolio")
        try:
            w, sol = unbounded(np.array(active))
        except (InfeasibleError, DegenerateSolutionError) as exc:
            raise InfeasibleError(f"relaxation failed on an active set of size {len(active)}: {exc}") from exc
        negative = [i for i in active if w[i] < 0]
        history.append({
            "iteration": k,
            "active_size": len(active),
            "n_negative": len(negative),
            "invariants": sol.invariants.to_dict() if sol is not None else None,
        })
        if not negative:
            break
        drop = _drop_choice(negative, f_single, c_diag)
        history[-1]["dropped"] = drop
        active.remove(drop)
        excluded.append((drop, k))
        k += 1

    tiny = [i for i in active if w[i] <= _SNAP * max(1.0, np.abs(w).max())]
    if tiny and len(tiny) < len(active):
        for i in tiny:
            active.remove(i)
            excluded.append((i, k))
    w = np.where(np.isin(np.arange(n), active), w, 0.0)
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    inv = scalar_invariants(model, e, np.array(active))
    if spec.kind == "sharpe":
        eff = e.copy()
    else:
        eff = e + inv.alpha / inv.beta
    return LongOnlySolution(
        weights=w,
        active_set=ActiveSet(included=sorted(active), excluded=excluded, iterations=k),
        effective_returns=eff,
        scalars=inv,
        spec=spec,
        history=history,
        restricted=sol,
    )


def fano_long_only(model, e) -> LongOnlySolution:
    """Approximate long-only Fano optimum by iterative relaxation."""
    model = as_risk_model(model)
    e = _values(e)
    if e.shape != (model.n,):
        raise ValidationError("expected returns have the wrong length")

    def unbounded(active):
        sol = maximize_fano(model, e, active)
        return sol.weights, sol

    return _relax(model, e, unbounded, RatioSpec.fano())


def sharpe_long_only(model, e) -> LongOnlySolution:
    """Sharpe analogue of the relaxation.

    Negative weights are read off the positively scaled direction C(J)^-1 E,
    so a negative gamma(J) never flips every sign at once.
    """
    model = as_risk_model(model)
    e = _values(e)
    if e.shape != (model.n,):
        raise ValidationError("expected returns have the wrong length")

    def unbounded(active):
        mask = np.zeros(model.n, dtype=bool)
        mask[active] = True
        u = model.solve(np.where(mask, e, 0.0), active)
        if not np.any(u[active] > 0):
            raise InfeasibleError("no instrument has a positive Sharpe weight")
        if np.all(u[active] >= 0):
            sol = maximize(model, e, RatioSpec.sharpe(), active)
            return sol.weights, sol
        return u, None

    return _relax(model, e, unbounded, RatioSpec.sharpe())


def general_long_only(model, e, spec: RatioSpec) -> LongOnlySolution:
    """Experimental: relaxation for any ratio, using the Fano drop criterion."""
    model = as_risk_model(model)
    e = _values(e)

    def unbounded(active):
        sol = maximize(model, e, spec, active)
        return sol.weights, sol

    return _relax(model, e, unbounded, spec)


# ----------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------

def volatility_bound_report(sigma, denominators=(5, 10)) -> dict:
    """sigma*, the bound sqrt(N) sigma* / k and how many sigma_i reach it."""
    if isinstance(sigma, VolatilityProfile):
        s = sigma.sigma[sigma.kept]
    else:
        s = np.asarray(sigma, dtype=float)
    if s.size == 0 or np.any(s <= 0):
        raise ValidationError("need a nonempty vector of positive volatilities")
    n = s.size
    star = math.sqrt(n / np.sum(1.0 / s**2))
    out = {"n": n, "sigma_star": star, "bounds": {}}
    for k in denominators:
        bound = math.sqrt(n) * star / k
        out["bounds"][str(k)] = {"sigma_tilde": bound, "count_at_or_above": int(np.sum(s >= bound))}
    return out


def diversification_report(fano_sol: LongOnlySolution, sharpe_sol: LongOnlySolution, sigma, e=None,
                           denominators=(5, 10)) -> dict:
    """Compare the active sets of the Fano and Sharpe long-only portfolios.

    Whether the Fano portfolio holds more names is reported, not asserted.
    """
    if fano_sol.weights.shape != sharpe_sol.weights.shape:
        raise ValidationError("solutions are on different universes")
    report = {
        "n_fano": len(fano_sol.active_set.included),
        "n_sharpe": len(sharpe_sol.active_set.included),
    }
    report["fano_more_diversified"] = report["n_fano"] >= report["n_sharpe"]
    if e is not None:
        e = _values(e)
        report["negative_return_held_fano"] = int(np.sum((e < 0) & (fano_sol.weights > 0)))
        report["negative_return_held_sharpe"] = int(np.sum((e < 0) & (sharpe_sol.weights > 0)))
    report["volatility"] = volatility_bound_report(sigma, denominators)
    return report


@dataclass
class OneFactorDemo:
    n: int
    rho: float
    exact: np.ndarray
    generic: np.ndarray
    approx: np.ndarray
    max_dev_generic: float
    max_dev_approx: float

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def _one_factor_inverse(x, sigma, s, rho):
    xt = x / sigma
    c = rho / (1.0 + (sigma.size - 1) * rho)
    return (xt - c * s * np.sum(xt * s)) / (sigma * (1.0 - rho))


def one_factor_demo(n: int, rho: float, seed: int = 0, sigma=None, e=None) -> OneFactorDemo:
    """Fano weights for C_ij = sigma_i sigma_j [(1 - rho) delta_ij + rho s_i s_j], s = +/-1.

    Three routes are compared, all normalized to sum(w) = 1: the closed
    form, the generic optimizer and the large-N approximation in which
    alpha / beta -> E~* sigma* and rho / (1 + (N - 1) rho) -> 1 / N.
    """
    n = int(n)
    if n < 2 or n % 2:
        raise ValidationError("n must be an even integer >= 2")
    if not -1.0 / (n - 1) < rho < 1.0:
        raise ValidationError("rho outside the positive-definite range")
    rng = np.random.default_rng(seed)
    if sigma is None:
        sigma = np.exp(math.log(0.0137) + 0.775 * rng.standard_normal(n))
    if e is None:
        e = sigma * (0.1 + rng.standard_normal(n)) * 0.05
    sigma = np.asarray(sigma, dtype=float)
    e = np.asarray(e, dtype=float)
    s = np.where(np.arange(n) < n // 2, 1.0, -1.0)

    et = e / sigma
    c = rho / (1.0 + (n - 1) * rho)
    alpha2 = (np.sum(et**2) - c * np.sum(et * s) ** 2) / (1.0 - rho)
    beta2 = (np.sum(1.0 / sigma**2) - c * np.sum(s / sigma) ** 2) / (1.0 - rho)
    gamma = float(np.sum(_one_factor_inverse(e, sigma, s, rho)))
    alpha, beta = math.sqrt(alpha2), math.sqrt(beta2)
    a = 1.0 / (alpha * beta + gamma)
    et_shift = et + (alpha / beta) / sigma
    exact = a / (sigma * (1.0 - rho)) * (et_shift - c * s * np.sum(et_shift * s))

    if rho > 0:
        model: RiskModel = FactorModel(sigma**2 * (1.0 - rho), (sigma * s)[:, None], [[rho]])
    else:
        model = DenseCovariance(np.outer(sigma, sigma) * ((1.0 - rho) * np.eye(n) + rho * np.outer(s, s)))
    generic = maximize_fano(model, e).weights

    star = math.sqrt(n / np.sum(1.0 / sigma**2))
    e_star = math.sqrt(np.sum(et**2) / n)
    bracket = et + e_star * star / sigma - s / n * np.sum(et * s + e_star * star * s / sigma)
    approx = bracket / (sigma * (1.0 - rho))
    approx = approx / approx.sum()

    scale = np.abs(exact).max()
    return OneFactorDemo(
        n=n,
        rho=float(rho),
        exact=exact,
        generic=generic,
        approx=approx,
        max_dev_generic=float(np.abs(generic - exact).max() / scale),
        max_dev_approx=float(np.abs(approx - exact / exact.sum()).max() / np.abs(exact / exact.sum()).max()),
    )
