"""Kernel density estimates of volatility and log-volatility."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde, skew

from .errors import ValidationError
from .market_data import VolatilityProfile

log = logging.getLogger(__name__)

__all__ = ["DensityCurve", "kde_curve", "volatility_densities"]


@dataclass
class DensityCurve:
    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    mean: float
    mode: float
    skewness: float
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {"bandwidth": self.bandwidth, "mean": self.mean, "mode": self.mode,
                "skewness": self.skewness, "warnings": list(self.warnings)}


def kde_curve(values, n_points: int = 512, pad: float = 3.0) -> DensityCurve:
    """Gaussian KDE on a regular grid, Silverman bandwidth.

    With fewer than two distinct values the KDE is undefined; a single
    Gaussian bump of width 10% of |x| (or 1 when x = 0) is returned and a
    warning recorded.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValidationError("empty universe: no values to estimate a density from")
    if not np.all(np.isfinite(v)):
        raise ValidationError("values must be finite")
    warnings: list[str] = []
    if np.unique(v).size < 2:
        bw = 0.1 * abs(v[0]) or 1.0
        msg = f"degenerate sample ({v.size} value(s), one distinct); using a fixed bandwidth {bw:.3g}"
        log.warning(msg)
        warnings.append(msg)
        x = np.linspace(v[0] - pad * bw, v[0] + pad * bw, n_points)
        dens = np.exp(-0.5 * ((x - v[0]) / bw) ** 2) / (bw * np.sqrt(2 * np.pi))
        return DensityCurve(x, dens, bw, float(v.mean()), float(v[0]), 0.0, warnings)
    kde = gaussian_kde(v, bw_method="silverman")
    bw = float(np.sqrt(kde.covariance[0, 0]))
    x = np.linspace(v.min() - pad * bw, v.max() + pad * bw, n_points)
    dens = kde(x)
    return DensityCurve(x, dens, bw, float(v.mean()), float(x[np.argmax(dens)]), float(skew(v)), warnings)


def volatility_densities(sigma, n_points: int = 512) -> dict[str, DensityCurve]:
    """Densities of sigma and log sigma over the instruments with sigma > 0."""
    s = sigma.sigma[sigma.kept] if isinstance(sigma, VolatilityProfile) else np.asarray(sigma, dtype=float)
    s = s[s > 0]
    if s.size == 0:
        raise ValidationError("empty universe: no instrument has positive volatility")
    return {"sigma": kde_curve(s, n_points), "log_sigma": kde_curve(np.log(s), n_points)}
