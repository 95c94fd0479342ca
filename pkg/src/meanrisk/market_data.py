"""Return/volume panels, expected returns and volatilities.

Panels follow the convention that column 0 is the most recent date and
column ``T-1`` the oldest.  Returns are taken to be already in excess of
the risk-free rate; no adjustment is applied anywhere in the package.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

__all__ = [
    "ReturnsPanel",
    "ExpectedReturns",
    "VolatilityProfile",
    "GeneratorConfig",
    "moving_average_returns",
    "rolling_volatility",
    "drop_zero_volatility",
    "rolling_addv",
    "synthesize_panel",
    "read_panel_csv",
    "write_panel_csv",
    "read_matrix_csv",
    "write_matrix_csv",
    "read_vector_csv",
    "write_vector_csv",
    "read_kv_file",
    "load_generator_config",
]


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ReturnsPanel:
    """N x T panel of per-period returns and dollar volumes.

    ``intraday`` (open-to-close returns) and ``open_prices`` are optional
    and only needed by the intraday backtest; when ``intraday`` is absent
    the close-to-close returns stand in for it.
    """

    returns: np.ndarray
    volumes: np.ndarray
    tickers: tuple[str, ...]
    dates: tuple[str, ...] = ()
    intraday: np.ndarray | None = None
    open_prices: np.ndarray | None = None
    synthetic: bool = False

    def __post_init__(self):
        r = _frozen(self.returns)
        v = _frozen(self.volumes)
        if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
            raise ValidationError(f"returns must be a non-empty N x T matrix, got shape {r.shape}")
        if v.shape != r.shape:
            raise ValidationError(f"volumes shape {v.shape} does not match returns {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValidationError("returns contain non-finite entries")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("volumes must be finite and nonnegative")
        n, t = r.shape
        tickers = tuple(str(x) for x in self.tickers) if self.tickers else tuple(f"S{i:05d}" for i in range(n))
        if len(tickers) != n:
            raise ValidationError(f"{len(tickers)} tickers for {n} instruments")
        dates = tuple(str(x) for x in self.dates) if self.dates else tuple(f"d{s}" for s in range(t))
        if len(dates) != t:
            raise ValidationError(f"{len(dates)} dates for {t} periods")
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "volumes", v)
        object.__setattr__(self, "tickers", tickers)
        object.__setattr__(self, "dates", dates)
        for name in ("intraday", "open_prices"):
            extra = getattr(self, name)
            if extra is None:
                continue
            extra = _frozen(extra)
            if extra.shape != r.shape or not np.all(np.isfinite(extra)):
                raise ValidationError(f"{name} must be a finite matrix of shape {r.shape}")
            object.__setattr__(self, name, extra)
        if self.open_prices is not None and np.any(self.open_prices <= 0):
            raise ValidationError("open_prices must be positive")

    @property
    def n(self) -> int:
        return self.returns.shape[0]

    @property
    def t(self) -> int:
        return self.returns.shape[1]

    @property
    def open_to_close(self) -> np.ndarray:
        return self.intraday if self.intraday is not None else self.returns

    def subset(self, index) -> "ReturnsPanel":
        """Panel restricted to the instruments in ``index`` (order kept)."""
        idx = np.asarray(index, dtype=int)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return ReturnsPanel(
            returns=self.returns[idx],
            volumes=self.volumes[idx],
            tickers=tuple(self.tickers[i] for i in idx),
            dates=self.dates,
            intraday=pick(self.intraday),
            open_prices=pick(self.open_prices),
            synthetic=self.synthetic,
        )

    def with_returns(self, returns, intraday=None) -> "ReturnsPanel":
        return ReturnsPanel(
            returns=returns,
            volumes=self.volumes,
            tickers=self.tickers,
            dates=self.dates,
            intraday=self.intraday if intraday is None else intraday,
            open_prices=self.open_prices,
            synthetic=self.synthetic,
        )


@dataclass(frozen=True, eq=False)
class ExpectedReturns:
    values: np.ndarray
    horizon_days: int = 1

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValidationError("expected returns must be a finite vector")
        if int(self.horizon_days) < 1:
            raise ValidationError("horizon_days must be positive")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class VolatilityProfile:
    """Per-instrument volatilities over a trailing window.

    ``sigma`` has one entry per panel instrument.  Instruments whose
    in-window variance is zero are listed in ``excluded`` and carry
    ``sigma == 0``; call :func:`drop_zero_volatility` before optimizing.
    """

    sigma: np.ndarray
    window: int
    excluded: tuple[int, ...] = ()

    def __post_init__(self):
        s = _frozen(self.sigma)
        if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValidationError("sigma must be a finite nonnegative vector")
        excl = tuple(int(i) for i in self.excluded)
        kept = np.ones(s.shape[0], dtype=bool)
        kept[list(excl)] = False
        if np.any(s[kept] <= 0):
            raise ValidationError("non-excluded instruments must have sigma > 0")
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "excluded", excl)

    @property
    def kept(self) -> np.ndarray:
        mask = np.ones(self.sigma.shape[0], dtype=bool)
        mask[list(self.excluded)] = False
        return np.flatnonzero(mask)

    def sigma_star(self) -> float:
        """Harmonic-mean-square volatility: N / sigma*^2 = sum 1 / sigma_i^2."""
        s = self.sigma[self.kept]
        if s.size == 0:
            raise ValidationError("empty universe")
        return float(math.sqrt(s.size / np.sum(1.0 / s**2)))


def moving_average_returns(panel: ReturnsPanel, d: int, s: int = 0) -> ExpectedReturns:
    """d-period moving average of the returns strictly older than date ``s``.

    ``s`` counts periods back from the forecast date: ``s = 0`` is the
    (unobserved) next date, so its forecast averages columns ``0..d-1``.
    """
    d, s = int(d), int(s)
    if d < 1 or s < 0:
        raise ValidationError("need d >= 1 and s >= 0")
    if s + d > panel.t:
        raise ValidationError(f"window s + d = {s + d} exceeds panel length T = {panel.t}")
    return ExpectedReturns(panel.returns[:, s : s + d].mean(axis=1), horizon_days=d)


def rolling_volatility(panel: ReturnsPanel, window: int) -> VolatilityProfile:
    window = int(window)
    if window < 2:
        raise ValidationError("window must be at least 2")
    if window > panel.t:
        raise ValidationError(f"window {window} exceeds panel length {panel.t}")
    sigma = panel.returns[:, :window].std(axis=1, ddof=1)
    # constant series can come out at ~1e-19 instead of 0
    scale = np.abs(panel.returns[:, :window]).max(axis=1)
    zero = sigma <= 1e-14 * np.maximum(scale, 1e-300)
    sigma = np.where(zero, 0.0, sigma)
    return VolatilityProfile(sigma=sigma, window=window, excluded=tuple(np.flatnonzero(zero)))


def drop_zero_volatility(panel: ReturnsPanel, profile: VolatilityProfile):
    """Remove zero-volatility instruments from both the panel and the profile."""
    if not profile.excluded:
        return panel, profile
    dropped = [panel.tickers[i] for i in profile.excluded]
    log.warning("dropping %d zero-volatility instrument(s): %s", len(dropped), ", ".join(dropped[:10]))
    kept = profile.kept
    return panel.subset(kept), VolatilityProfile(profile.sigma[kept], profile.window)


def rolling_addv(panel: ReturnsPanel, window: int = 21) -> np.ndarray:
    """Average daily dollar volume over the most recent ``window`` periods."""
    window = min(int(window), panel.t)
    if window < 1:
        raise ValidationError("window must be positive")
    return panel.volumes[:, :window].mean(axis=1)


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic market configuration.

    Standardized returns are ``sqrt(market_rho) * m + sqrt(factor_share) * f
    + noise`` with unit variance per instrument, scaled by a log-normal
    cross-section of volatilities.  The defaults reproduce the median and
    mean of the 21-day volatility cross-section of a broad US universe
    (0.0137 and 0.0185).
    """

    n: int = 500
    t: int = 504
    k_factors: int = 3
    market_rho: float = 0.3
    factor_share: float = 0.2
    sigma_lognormal_mu: float = math.log(0.0137)
    sigma_lognormal_sd: float = math.sqrt(2.0 * math.log(0.0185 / 0.0137))
    overnight_fraction: float = 0.3
    reversal: float = 0.0
    volume_lognormal_mu: float = math.log(2.0e7)
    volume_lognormal_sd: float = 1.0
    volume_noise_sd: float = 0.3
    price_lognormal_mu: float = math.log(50.0)
    price_lognormal_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise ValidationError("n and t must be >= 1")
        if self.k_factors < 0:
            raise ValidationError("k_factors must be >= 0")
        share = self.factor_share if self.k_factors > 0 else 0.0
        if not 0.0 <= self.market_rho <= 1.0 or share < 0.0:
            raise ValidationError("market_rho must lie in [0, 1] and factor_share must be >= 0")
        if self.market_rho + share > 1.0 + 1e-12:
            raise ValidationError("market_rho + factor_share > 1 leaves a negative idiosyncratic variance")
        for name in ("sigma_lognormal_sd", "volume_lognormal_sd", "volume_noise_sd", "price_lognormal_sd"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if not 0.0 <= self.overnight_fraction <= 1.0:
            raise ValidationError("overnight_fraction must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "GeneratorConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ValidationError(f"unknown generator key(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, value in mapping.items():
            caster = int if key in ("n", "t", "k_factors", "seed") else float
            try:
                kwargs[key] = caster(value)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"bad value for {key}: {value!r}") from exc
        return cls(**kwargs)


def _synthetic_dates(t: int) -> tuple[str, ...]:
    end = np.datetime64("2014-09-05")
    offsets = -np.arange(t)
    days = np.busday_offset(end, offsets, roll="backward")
    return tuple(str(d) for d in days)


def synthesize_panel(n: int | None = None, t: int | None = None, spec: GeneratorConfig | None = None,
                     seed: int | None = None) -> ReturnsPanel:
    """Deterministic synthetic panel with a market mode, K factors and noise.

    Explicit ``n``, ``t`` and ``seed`` override the values in ``spec``.
    The panel carries open-to-close returns and open prices so that the
    intraday backtest is well posed.
    """
    spec = spec or GeneratorConfig()
    overrides = {k: v for k, v in (("n", n), ("t", t), ("seed", seed)) if v is not None}
    if overrides:
        spec = GeneratorConfig(**{**spec.__dict__, **overrides})
    rng = np.random.default_rng(spec.seed)
    n, t, k = spec.n, spec.t, spec.k_factors

    sigma = np.exp(spec.sigma_lognormal_mu + spec.sigma_lognormal_sd * rng.standard_normal(n))
    share = spec.factor_share if k > 0 else 0.0
    noise_var = max(0.0, 1.0 - spec.market_rho - share)
    loadings = rng.standard_normal((n, k))
    if k:
        loadings /= np.linalg.norm(loadings, axis=1, keepdims=True)

    def shocks():
        z = math.sqrt(spec.market_rho) * rng.standard_normal(t)[None, :]
        if k:
            z = z + math.sqrt(share) * (loadings @ rng.standard_normal((k, t)))
        if noise_var > 0:
            z = z + math.sqrt(noise_var) * rng.standard_normal((n, t))
        return np.broadcast_to(z, (n, t))

    ov = spec.overnight_fraction
    overnight = sigma[:, None] * math.sqrt(ov) * shocks()
    intraday = sigma[:, None] * math.sqrt(1.0 - ov) * shocks()
    # chronological order here: column 0 is the oldest date
    returns = np.empty((n, t))
    for s in range(t):
        if s > 0 and spec.reversal:
            intraday[:, s] -= spec.reversal * returns[:, s - 1]
        returns[:, s] = (1.0 + overnight[:, s]) * (1.0 + intraday[:, s]) - 1.0

    p0 = np.exp(spec.price_lognormal_mu + spec.price_lognormal_sd * rng.standard_normal(n))
    growth = np.cumprod(1.0 + returns, axis=1)
    prev_close = np.concatenate([p0[:, None], p0[:, None] * growth[:, :-1]], axis=1)
    open_prices = prev_close * (1.0 + overnight)

    addv = np.exp(spec.volume_lognormal_mu + spec.volume_lognormal_sd * rng.standard_normal(n))
    vs = spec.volume_noise_sd
    volumes = addv[:, None] * np.exp(vs * rng.standard_normal((n, t)) - 0.5 * vs * vs)

    rev = np.s_[:, ::-1]
    return ReturnsPanel(
        returns=returns[rev],
        volumes=volumes[rev],
        tickers=tuple(f"SYN{i:05d}" for i in range(n)),
        dates=_synthetic_dates(t),
        intraday=intraday[rev],
        open_prices=open_prices[rev],
        synthetic=True,
    )


# ----------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------

def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows:
        raise ValidationError(f"{path}: empty file")
    return rows


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a labelled matrix: header row of column labels, first column row labels."""
    rows = _read_rows(path)
    header, body = rows[0], rows[1:]
    if not body:
        raise ValidationError(f"{path}: no data rows")
    labels, values = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        labels.append(row[0])
        try:
            values.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return labels, header[1:], np.array(values, dtype=float)


def write_matrix_csv(path, row_labels, col_labels, matrix, corner="ticker", header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([corner, *col_labels])
        for label, row in zip(row_labels, np.asarray(matrix)):
            w.writerow([label, *(repr(float(x)) for x in row)])


def read_vector_csv(path) -> tuple[list[str], np.ndarray]:
    labels, _, values = read_matrix_csv(path)
    if values.shape[1] != 1:
        raise ValidationError(f"{path}: expected a single value column")
    return labels, values[:, 0]


def write_vector_csv(path, labels, values, name="value", header_comment=None):
    write_matrix_csv(path, labels, [name], np.asarray(values, dtype=float)[:, None],
                     header_comment=header_comment)


def read_panel_csv(returns_path, volumes_path=None, intraday_path=None, open_prices_path=None) -> ReturnsPanel:
    """Load a panel from CSV files (rows = tickers, columns = dates, most recent first).

    Without a volumes file every volume is set to 1 dollar, which keeps the
    panel valid but makes dollar-volume based costs meaningless.
    """
    tickers, dates, r = read_matrix_csv(returns_path)

    def companion(path, what):
        if path is None:
            return None
        tk, dt, m = read_matrix_csv(path)
        if tk != tickers or dt != dates:
            raise ValidationError(f"{what} file {path} does not match the returns tickers/dates")
        return m

    v = companion(volumes_path, "volumes")
    if v is None:
        log.warning("no volumes file given; using unit volumes")
        v = np.ones_like(r)
    return ReturnsPanel(
        returns=r,
        volumes=v,
        tickers=tuple(tickers),
        dates=tuple(dates),
        intraday=companion(intraday_path, "intraday"),
        open_prices=companion(open_prices_path, "open prices"),
    )


def write_panel_csv(panel: ReturnsPanel, directory, header_comment=None) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, m in (("returns", panel.returns), ("volumes", panel.volumes),
                    ("intraday", panel.intraday), ("open_prices", panel.open_prices)):
        if m is None:
            continue
        path = directory / f"{name}.csv"
        write_matrix_csv(path, panel.tickers, panel.dates, m, header_comment=header_comment)
        out[name] = path
    return out


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    result = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":"
            key, found, value = line.partition(sep)
            if not found or not key.strip():
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            result[key.strip()] = value.strip()
    return result


def load_generator_config(path) -> GeneratorConfig:
    return GeneratorConfig.from_mapping(read_kv_file(path))
