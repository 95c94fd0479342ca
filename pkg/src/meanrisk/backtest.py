"""Linear trading costs and an intraday (open-to-close) backtest.

Each date the strategy sees only data strictly before that date's open.
Positions H_i = I w_i are established at the open and liquidated at the
close; each leg costs tau_i |H_i|, so net = gross - 2 sum tau_i |H_i|.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    DegenerateSolutionError,
    InfeasibleError,
    LookaheadError,
    ModelError,
    ValidationError,
)
from .long_short import StrategyConfig, apply_position_bounds, series_returns
from .market_data import (
    ExpectedReturns,
    ReturnsPanel,
    VolatilityProfile,
    moving_average_returns,
    rolling_addv,
    rolling_volatility,
)
from .ratio_optimizer import _jsonable
from .risk_models import ConstraintSet, RiskModel, build_statistical_model

log = logging.getLogger(__name__)

__all__ = [
    "CostModel",
    "calibrate_costs",
    "effective_returns",
    "PanelView",
    "DateContext",
    "StrategyTarget",
    "MultiOptStrategy",
    "SharpeStrategy",
    "BacktestReport",
    "run_intraday_backtest",
    "sweep",
    "TRADING_DAYS",
    "AVERAGE_COST",
]

TRADING_DAYS = 252
AVERAGE_COST = 1e-3  # 10 bps per dollar traded on average


@dataclass(frozen=True, eq=False)
class CostModel:
    tau: np.ndarray
    zeta: float

    def __post_init__(self):
        tau = np.array(self.tau, dtype=float)
        if tau.ndim != 1 or not np.all(np.isfinite(tau)) or np.any(tau < 0):
            raise ValidationError("tau must be a finite nonnegative vector")
        if not self.zeta > 0:
            raise ValidationError("zeta must be positive")
        tau.flags.writeable = False
        object.__setattr__(self, "tau", tau)

    @classmethod
    def zero(cls, n: int) -> "CostModel":
        return cls(np.zeros(n), 1.0)


def calibrate_costs(sigma, addv, average: float = AVERAGE_COST) -> CostModel:
    """tau_i = zeta sigma_i / A_i with zeta set so that mean(tau) = ``average``."""
    s = sigma.sigma if isinstance(sigma, VolatilityProfile) else np.asarray(sigma, dtype=float)
    a = np.asarray(addv, dtype=float)
    if s.shape != a.shape or s.ndim != 1:
        raise ValidationError("sigma and ADDV must be vectors of equal length")
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        bad = np.flatnonzero(~(a > 0))
        raise ValidationError(f"instruments {bad[:10].tolist()} have zero ADDV; exclude them first")
    ratio = s / a
    m = ratio.mean()
    if not m > 0:
        raise ValidationError("sigma / ADDV averages to zero")
    zeta = average / m
    tau = zeta * ratio
    # remove the last rounding error so the mean is the target to the ulp
    tau = tau * (average / tau.mean())
    return CostModel(tau, zeta)


def effective_returns(e, costs: CostModel):
    """sign(E) max(|E| - tau, 0): an approximation, not the cost-aware optimum."""
    vals = np.asarray(getattr(e, "values", e), dtype=float)
    tau = costs.tau if isinstance(costs, CostModel) else np.asarray(costs, dtype=float)
    if vals.shape != tau.shape:
        raise ValidationError("expected returns and costs differ in length")
    out = np.sign(vals) * np.maximum(np.abs(vals) - tau, 0.0)
    if isinstance(e, ExpectedReturns):
        return ExpectedReturns(out, e.horizon_days)
    return out


# ----------------------------------------------------------------------
# out-of-sample data access
# ----------------------------------------------------------------------

class PanelView:
    """History available before the open of panel column ``col``.

    Lag 1 is the previous date.  Anything at lag < 1 raises
    :class:`LookaheadError`.
    """

    def __init__(self, panel: ReturnsPanel, col: int):
        self._panel = panel
        self._col = int(col)

    @property
    def date(self) -> str:
        return self._panel.dates[self._col] if self._panel.dates else str(self._col)

    @property
    def depth(self) -> int:
        return self._panel.t - self._col - 1

    @property
    def n(self) -> int:
        return self._panel.n

    @property
    def tickers(self):
        return self._panel.tickers

    def _slice(self, start_lag: int, count: int | None):
        if start_lag < 1:
            raise LookaheadError(f"strategy requested lag {start_lag} on {self.date}; only lags >= 1 are visible")
        lo = self._col + start_lag
        hi = self._panel.t if count is None else lo + int(count)
        if hi > self._panel.t:
            raise ValidationError(f"only {self.depth} periods of history before {self.date}")
        return slice(lo, hi)

    def returns(self, start_lag: int = 1, count: int | None = None) -> np.ndarray:
        return self._panel.returns[:, self._slice(start_lag, count)]

    def volumes(self, start_lag: int = 1, count: int | None = None) -> np.ndarray:
        return self._panel.volumes[:, self._slice(start_lag, count)]

    def history(self, count: int | None = None, index=None) -> ReturnsPanel:
        """The visible history as a panel (most recent column first)."""
        sl = self._slice(1, count)
        p = self._panel
        idx = slice(None) if index is None else np.asarray(index)
        return ReturnsPanel(
            returns=p.returns[idx, sl],
            volumes=p.volumes[idx, sl],
            tickers=p.tickers if index is None else tuple(p.tickers[i] for i in index),
            dates=p.dates[sl] if p.dates else (),
            synthetic=p.synthetic,
        )


@dataclass
class DateContext:
    view: PanelView
    sigma: VolatilityProfile
    addv: np.ndarray
    costs: CostModel
    tradable: np.ndarray  # instruments with sigma > 0 and ADDV > 0
    investment: float


@dataclass
class StrategyTarget:
    """Series returns, model and constraints on ``index`` (a subset of N)."""

    e_hat: np.ndarray
    model: RiskModel
    constraints: ConstraintSet | None
    index: np.ndarray


Strategy = Callable[[DateContext], "StrategyTarget | np.ndarray | None"]


class _DateInputs:
    """Cache of per-date expected returns and risk models shared by strategies."""

    def __init__(self):
        self.store: dict = {}

    def get(self, key, build):
        if key not in self.store:
            self.store[key] = build()
        return self.store[key]


class MultiOptStrategy:
    """Mean-reversion signal E = -MA(d), cost-adjusted, fed to the series.

    The statistical risk model uses the trailing ``risk_window`` periods.
    """

    def __init__(self, config: StrategyConfig, cache: _DateInputs | None = None):
        self.config = config
        self.cache = cache if cache is not None else _DateInputs()

    def inputs(self, ctx: DateContext):
        cfg = self.config
        key = (ctx.view.date, cfg.ma_days, cfg.risk_window, cfg.remove_market_mode, cfg.constraints,
               ctx.tradable.tobytes())

        def build():
            idx = ctx.tradable
            hist = ctx.view.history(max(cfg.ma_days, cfg.risk_window), index=idx)
            e = -moving_average_returns(hist, cfg.ma_days).values
            e = effective_returns(e, ctx.costs.tau[idx])
            model = build_statistical_model(hist, remove_market_mode=cfg.remove_market_mode,
                                            window=cfg.risk_window)
            return e, model, cfg.constraint_set(idx.size)

        return self.cache.get(key, build)

    def __call__(self, ctx: DateContext):
        e, model, cons = self.inputs(ctx)
        if not np.any(e):
            return None
        e_hat, _ = series_returns(model, e, self.config.n_opt, self.config.b_hat)
        return StrategyTarget(e_hat, model, cons, ctx.tradable)


class SharpeStrategy(MultiOptStrategy):
    """Plain Sharpe weights C^-1 E built from the same per-date inputs."""

    def __call__(self, ctx: DateContext):
        e, model, cons = self.inputs(ctx)
        if not np.any(e):
            return None
        return StrategyTarget(e, model, cons, ctx.tradable)


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------

@dataclass
class BacktestReport:
    dates: list[str]
    daily_pnl: np.ndarray
    gross_pnl: np.ndarray
    costs: np.ndarray
    shares: np.ndarray
    roc: float
    sr: float
    cps: float
    total_shares: float
    investment: float
    positions: np.ndarray | None = None  # N x D dollars, chronological columns
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"roc": _finite_or_none(self.roc), "sr": _finite_or_none(self.sr),
                "cps": _finite_or_none(self.cps), "total_shares": self.total_shares,
                "days": len(self.dates)}

    def to_dict(self) -> dict:
        out = {
            "meta": self.meta,
            "investment": self.investment,
            "first_date": self.dates[0] if self.dates else None,
            "last_date": self.dates[-1] if self.dates else None,
            **self.summary(),
            "total_net_pnl": float(self.daily_pnl.sum()),
            "total_gross_pnl": float(self.gross_pnl.sum()),
            "total_costs": float(self.costs.sum()),
            "flags": self.flags,
        }
        return _jsonable(out)

    def write_json(self, path, header: dict | None = None) -> Path:
        body = {"provenance": header, **self.to_dict()} if header else self.to_dict()
        path = Path(path)
        path.write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n")
        return path

    def write_csv(self, path, header_comment: str | None = None) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            if header_comment:
                for line in header_comment.splitlines():
                    fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["date", "gross_pnl", "costs", "net_pnl", "shares"])
            for row in zip(self.dates, self.gross_pnl, self.costs, self.daily_pnl, self.shares):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return path


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


def _metrics(net, shares, investment, have_prices):
    days = net.size
    flags = []
    total = float(net.sum())
    roc = total / investment * (TRADING_DAYS / days) if days else math.nan
    sd = float(net.std(ddof=1)) if days > 1 else 0.0
    if days > 1 and sd > 0:
        sr = float(net.mean()) / sd * math.sqrt(TRADING_DAYS)
    else:
        sr = math.nan
        flags.append("sr_undefined")
    total_shares = float(shares.sum())
    if not have_prices:
        cps = math.nan
        flags.append("cps_unavailable")
    elif total_shares > 0:
        cps = 100.0 * total / total_shares
    else:
        cps = math.nan
        flags.append("cps_undefined")
    return roc, sr, cps, total_shares, flags


# ----------------------------------------------------------------------
# backtest loop
# ----------------------------------------------------------------------

def _column_for(panel: ReturnsPanel, date, default: int) -> int:
    if date is None:
        return default
    if isinstance(date, (int, np.integer)):
        return int(date)
    try:
        return panel.dates.index(str(date))
    except ValueError:
        raise ValidationError(f"date {date!r} not in panel") from None


def run_intraday_backtest(panel: ReturnsPanel, strategy: Strategy, investment: float = 2e7,
                          costs: CostModel | None = None, bounds_fraction: float = 0.01,
                          warmup: int = 21, vol_window: int = 21, addv_window: int = 21,
                          start=None, end=None, keep_positions: bool = True) -> BacktestReport:
    """Trade ``strategy`` at each open and liquidate at the close.

    ``costs=None`` recalibrates tau from trailing volatility and ADDV each
    date; a fixed :class:`CostModel` is used as given.  ``start`` and
    ``end`` are date labels (or column indices) bounding the run.
    """
    if not investment > 0:
        raise ValidationError("investment must be positive")
    if not bounds_fraction > 0:
        raise ValidationError("bounds_fraction must be positive")
    n, t = panel.n, panel.t
    warmup = max(int(warmup), vol_window, 2)
    last_col = t - 1 - warmup  # oldest column with enough history
    if last_col < 0:
        raise ValidationError(f"panel has {t} periods; need more than {warmup}")
    hi = min(_column_for(panel, start, last_col), last_col)
    lo = max(_column_for(panel, end, 0), 0)
    cols = list(range(hi, lo - 1, -1))  # chronological
    if not cols:
        raise ValidationError("empty backtest range")
    if costs is not None and costs.tau.shape != (n,):
        raise ValidationError("cost model has the wrong length")

    oc = panel.open_to_close
    prices = panel.open_prices
    dates, net, gross, cost, shares = [], [], [], [], []
    flags: list[str] = []
    positions = np.zeros((n, len(cols))) if keep_positions else None

    for k, col in enumerate(cols):
        view = PanelView(panel, col)
        sig = rolling_volatility(view.history(vol_window), vol_window)
        addv = rolling_addv(view.history(addv_window), addv_window)
        tradable = np.flatnonzero((sig.sigma > 0) & (addv > 0))
        if costs is None:
            day_costs = CostModel(np.zeros(n), 1.0)
            if tradable.size:
                sub = calibrate_costs(sig.sigma[tradable], addv[tradable])
                tau = np.zeros(n)
                tau[tradable] = sub.tau
                day_costs = CostModel(tau, sub.zeta)
        else:
            day_costs = costs
        ctx = DateContext(view, sig, addv, day_costs, tradable, investment)
        cap = bounds_fraction * addv / investment
        h = np.zeros(n)
        try:
            target = strategy(ctx)
            if target is None:
                flags.append(f"{view.date}: no signal")
            elif isinstance(target, StrategyTarget):
                idx = np.asarray(target.index)
                res = apply_position_bounds(target.e_hat, target.model, (-cap[idx], cap[idx]), target.constraints)
                h[idx] = investment * res.weights
            else:
                w = np.asarray(target, dtype=float)
                if w.shape != (n,):
                    raise ValidationError("strategy returned weights of the wrong length")
                h = investment * np.clip(w, -cap, cap)
        except (InfeasibleError, DegenerateSolutionError, ModelError) as exc:
            flags.append(f"{view.date}: flat ({exc})")
            h = np.zeros(n)
        g = float(h @ oc[:, col])
        c = 2.0 * float(day_costs.tau @ np.abs(h))
        sh = float(np.sum(2.0 * np.abs(h) / prices[:, col])) if prices is not None else 0.0
        dates.append(view.date)
        gross.append(g)
        cost.append(c)
        net.append(g - c)
        shares.append(sh)
        if positions is not None:
            positions[:, k] = h

    net_a = np.array(net)
    shares_a = np.array(shares)
    roc, sr, cps, total_shares, mflags = _metrics(net_a, shares_a, investment, prices is not None)
    if panel.synthetic and prices is not None:
        mflags.append("cps_synthetic_prices")
    return BacktestReport(
        dates=dates,
        daily_pnl=net_a,
        gross_pnl=np.array(gross),
        costs=np.array(cost),
        shares=shares_a,
        roc=roc,
        sr=sr,
        cps=cps,
        total_shares=total_shares,
        investment=float(investment),
        positions=positions,
        flags=mflags + flags,
        meta={"bounds_fraction": bounds_fraction, "n": n},
    )


def sweep(panel: ReturnsPanel, config: StrategyConfig, n_opts=(1, 2, 3, 4, 5), investment: float = 2e7,
          costs: CostModel | None = None, **kwargs) -> tuple[list[dict], list[BacktestReport]]:
    """Backtest each n_opt with shared per-date inputs; returns (summary rows, reports)."""
    cache = _DateInputs()
    rows, reports = [], []
    for n_opt in n_opts:
        cfg = StrategyConfig(**{**config.__dict__, "n_opt": int(n_opt)})
        rep = run_intraday_backtest(panel, MultiOptStrategy(cfg, cache), investment=investment,
                                    costs=costs, bounds_fraction=cfg.bounds_fraction,
                                    warmup=max(cfg.ma_days, cfg.risk_window), **kwargs)
        rep.meta.update({"n_opt": int(n_opt), "b_hat": cfg.b_hat})
        rows.append({"n_opt": int(n_opt), **rep.summary()})
        reports.append(rep)
    return rows, reports
