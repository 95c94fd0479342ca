import numpy as np
import pytest

from meanrisk.density import kde_curve, volatility_densities
from meanrisk.errors import ValidationError
from meanrisk.market_data import VolatilityProfile


@pytest.fixture(scope="module")
def sigma():
    rng = np.random.default_rng(21)
    return np.exp(np.log(0.0137) + 0.775 * rng.standard_normal(3810))


def test_sigma_density_is_right_skewed(sigma):
    curves = volatility_densities(sigma)
    s = curves["sigma"]
    assert s.mode < s.mean
    assert s.skewness > 1.0


def test_log_sigma_density_is_nearly_symmetric(sigma):
    assert abs(volatility_densities(sigma)["log_sigma"].skewness) < 0.2


def test_density_integrates_to_one(sigma):
    c = kde_curve(np.log(sigma))
    area = np.sum(0.5 * (c.density[1:] + c.density[:-1]) * np.diff(c.x))
    assert area == pytest.approx(1.0, abs=1e-3)


def test_silverman_bandwidth():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(400)
    # scipy's Silverman factor applied to the sample standard deviation
    expected = (400 * 3 / 4) ** (-1 / 5) * v.std(ddof=1)
    assert kde_curve(v).bandwidth == pytest.approx(expected, rel=1e-12)


def test_single_stock_warns():
    c = kde_curve([0.02])
    assert c.warnings and "degenerate" in c.warnings[0]
    assert c.mode == 0.02


def test_profile_input_drops_zero_sigma():
    prof = VolatilityProfile(np.array([0.01, 0.0, 0.02, 0.03]), 21, excluded=(1,))
    curves = volatility_densities(prof, n_points=64)
    assert curves["sigma"].x.size == 64


def test_empty_universe_rejected():
    with pytest.raises(ValidationError):
        kde_curve([])
    with pytest.raises(ValidationError):
        volatility_densities(np.zeros(3))
