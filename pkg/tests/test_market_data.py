import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meanrisk.errors import ValidationError
from meanrisk.market_data import (
    GeneratorConfig,
    ReturnsPanel,
    drop_zero_volatility,
    load_generator_config,
    moving_average_returns,
    read_panel_csv,
    rolling_addv,
    rolling_volatility,
    synthesize_panel,
    write_panel_csv,
)


def panel(r, v=None):
    r = np.atleast_2d(np.asarray(r, dtype=float))
    return ReturnsPanel(r, np.ones_like(r) if v is None else v, tuple(f"S{i}" for i in range(r.shape[0])))


def test_moving_average_hand_value():
    assert moving_average_returns(panel([[0.1, 0.3]]), 2).values[0] == pytest.approx(0.2)


def test_moving_average_constant_panel():
    p = panel(np.full((3, 6), 0.0125))
    for d in range(1, 7):
        np.testing.assert_allclose(moving_average_returns(p, d).values, 0.0125)


def test_moving_average_matches_loop(rng):
    r = rng.standard_normal((3, 10))
    for s in range(0, 5):
        got = moving_average_returns(panel(r), 5, s).values
        for i in range(3):
            acc = 0.0
            for j in range(s, s + 5):
                acc += r[i, j]
            assert got[i] == pytest.approx(acc / 5, abs=1e-15)


def test_moving_average_range_error():
    with pytest.raises(ValidationError):
        moving_average_returns(panel(np.zeros((2, 4))), 3, s=2)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10))
def test_moving_average_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal((2, 4, 12))
    lhs = moving_average_returns(panel(a * r1 + b * r2), 4, 3).values
    rhs = a * moving_average_returns(panel(r1), 4, 3).values + b * moving_average_returns(panel(r2), 4, 3).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_rolling_volatility_hand_value():
    prof = rolling_volatility(panel([[1, -1, 1, -1]]), 4)
    assert prof.sigma[0] == pytest.approx(math.sqrt(4 / 3), abs=1e-12)


def test_rolling_volatility_flags_constant_rows():
    prof = rolling_volatility(panel([[0.01] * 5, [0.01, 0.02, 0.0, 0.01, 0.03]]), 5)
    assert prof.excluded == (0,)
    p2, prof2 = drop_zero_volatility(panel([[0.01] * 5, [0.01, 0.02, 0.0, 0.01, 0.03]]), prof)
    assert p2.n == 1 and prof2.sigma.size == 1


def test_rolling_volatility_two_pass_oracle(rng):
    r = rng.standard_normal((2, 17))
    prof = rolling_volatility(panel(r), 17)
    for i in range(2):
        mean = sum(r[i]) / 17
        var = sum((x - mean) ** 2 for x in r[i]) / 16
        assert prof.sigma[i] == pytest.approx(math.sqrt(var), rel=1e-12)


def test_rolling_volatility_window_checks():
    with pytest.raises(ValidationError):
        rolling_volatility(panel(np.zeros((1, 4))), 1)
    with pytest.raises(ValidationError):
        rolling_volatility(panel(np.zeros((1, 4))), 5)


@given(arrays(float, (3, 8), elements=st.floats(-0.1, 0.1)), st.floats(0.01, 100))
def test_rolling_volatility_scale_covariant(r, lam):
    base = rolling_volatility(panel(r), 8)
    scaled = rolling_volatility(panel(lam * r), 8)
    keep = [i for i in range(3) if i not in base.excluded and i not in scaled.excluded]
    np.testing.assert_allclose(scaled.sigma[keep], lam * base.sigma[keep], rtol=1e-9)


def test_synthesize_is_deterministic():
    a = synthesize_panel(20, 30, seed=4)
    b = synthesize_panel(20, 30, seed=4)
    assert np.array_equal(a.returns, b.returns) and np.array_equal(a.volumes, b.volumes)
    assert np.array_equal(a.intraday, b.intraday) and np.array_equal(a.open_prices, b.open_prices)
    assert not np.array_equal(a.returns, synthesize_panel(20, 30, seed=5).returns)


@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_synthesize_shape_and_positive_volumes(n, t, seed):
    p = synthesize_panel(n, t, seed=seed)
    assert p.returns.shape == (n, t) and p.volumes.shape == (n, t)
    assert np.all(p.volumes > 0) and np.all(p.open_prices > 0)


def test_synthetic_sigma_right_skewed():
    p = synthesize_panel(3810, 21, seed=1)
    s = rolling_volatility(p, 21).sigma
    assert s.mean() > np.median(s)


def test_rank_one_panel_is_perfectly_correlated():
    spec = GeneratorConfig(n=6, t=40, k_factors=0, market_rho=1.0, factor_share=0.0, overnight_fraction=0.0)
    r = synthesize_panel(spec=spec).returns
    np.testing.assert_allclose(np.corrcoef(r), 1.0, atol=1e-10)


def test_generator_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        GeneratorConfig(market_rho=0.9, factor_share=0.2)
    with pytest.raises(ValidationError):
        GeneratorConfig(sigma_lognormal_sd=-1.0)
    with pytest.raises(ValidationError):
        GeneratorConfig.from_mapping({"bogus": "1"})
    f = tmp_path / "gen.cfg"
    f.write_text("n = 7\n# comment\nt: 9\nseed = 3\n")
    cfg = load_generator_config(f)
    assert (cfg.n, cfg.t, cfg.seed) == (7, 9, 3)


def test_panel_csv_round_trip(tmp_path):
    p = synthesize_panel(4, 6, seed=2)
    paths = write_panel_csv(p, tmp_path, header_comment="test")
    q = read_panel_csv(paths["returns"], paths["volumes"], paths["intraday"], paths["open_prices"])
    assert q.tickers == p.tickers and q.dates == p.dates
    assert np.array_equal(q.returns, p.returns) and np.array_equal(q.open_prices, p.open_prices)


def test_panel_validation():
    with pytest.raises(ValidationError):
        panel([[np.nan, 0.1]])
    with pytest.raises(ValidationError):
        panel([[0.1, 0.2]], v=np.array([[-1.0, 1.0]]))


def test_rolling_addv():
    v = np.array([[1.0, 3.0, 100.0]])
    assert rolling_addv(panel(np.zeros((1, 3)), v), 2)[0] == 2.0
