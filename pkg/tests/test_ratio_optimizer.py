import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from conftest import random_pd
from oracles import family_grid_max, two_asset_grid_max
from meanrisk.errors import DegenerateSolutionError, InfeasibleError, ModelError, NumericalError, ValidationError
from meanrisk.ratio_optimizer import (
    RatioSpec,
    evaluate_portfolio,
    maximize,
    maximize_fano,
    maximize_general,
    maximize_sharpe,
    scalar_invariants,
    stationarity_residual,
)
from meanrisk.risk_models import DenseCovariance, UniformCorrelationModel

I2 = np.eye(2)


def test_invariants_identity_and_diagonal():
    inv = scalar_invariants(I2, [1, 1])
    assert (inv.alpha2, inv.beta2, inv.gamma) == pytest.approx((2, 2, 2))
    inv = scalar_invariants(np.diag([1.0, 4.0]), [1, 1])
    assert (inv.alpha2, inv.beta2, inv.gamma) == pytest.approx((1.25, 1.25, 1.25))


def test_invariants_match_dense_solve(rng):
    c = random_pd(rng, 6)
    e = rng.standard_normal(6)
    inv = scalar_invariants(c, e)
    x = np.linalg.solve(c, e)
    y = np.linalg.solve(c, np.ones(6))
    assert inv.alpha2 == pytest.approx(e @ x, rel=1e-10)
    assert inv.beta2 == pytest.approx(y.sum(), rel=1e-10)
    assert inv.gamma == pytest.approx(x.sum(), rel=1e-10)
    assert inv.gamma**2 <= inv.alpha2 * inv.beta2


def test_sharpe_examples():
    s = maximize_sharpe(I2, [1, 1])
    np.testing.assert_allclose(s.weights, [0.5, 0.5])
    assert s.sharpe == pytest.approx(math.sqrt(2))
    s = maximize_sharpe(I2, [3, 1])
    np.testing.assert_allclose(s.weights, [0.75, 0.25])
    assert s.e_port == pytest.approx(2.5) and s.v_port == pytest.approx(10 / 16)
    val, w = two_asset_grid_max(I2, np.array([3.0, 1.0]), lambda e, v: e / np.sqrt(v))
    np.testing.assert_allclose(s.weights, w, atol=1e-4)


def test_sharpe_uniform_correlation_cross_check():
    m = UniformCorrelationModel([1.0, 1.0], 0.5)
    np.testing.assert_allclose(maximize_sharpe(m, [1.0, 0.0]).weights, [2.0, -1.0], rtol=1e-12)


def test_sharpe_degenerate_gamma():
    with pytest.raises(DegenerateSolutionError):
        maximize_sharpe(I2, [1.0, -1.0])


def test_fano_examples():
    f = maximize_fano(I2, [1, 1])
    np.testing.assert_allclose(f.weights, [0.5, 0.5])
    assert (f.fano, f.e_port, f.v_port) == pytest.approx((2.0, 1.0, 0.5))
    f = maximize_fano(np.diag([1.0, 4.0]), [1, 1])
    np.testing.assert_allclose(f.weights, [0.8, 0.2])
    assert f.fano == pytest.approx(1.25)
    val, w = two_asset_grid_max(np.diag([1.0, 4.0]), np.array([1.0, 1.0]), lambda e, v: e / v)
    assert val == pytest.approx(1.25, rel=1e-6)


def test_fano_infeasible_for_adverse_returns():
    with pytest.raises(InfeasibleError):
        maximize_fano(I2, [-1.0, -1.0])


def test_fano_closed_form_values(rng):
    c = random_pd(rng, 5)
    e = rng.standard_normal(5) + 0.5
    f = maximize_fano(c, e)
    inv = f.invariants
    lam = inv.alpha * inv.beta + inv.gamma
    assert f.e_port == pytest.approx(inv.alpha / inv.beta, rel=1e-10)
    assert f.v_port == pytest.approx(2 * inv.alpha / (inv.beta * lam), rel=1e-10)
    assert f.fano == pytest.approx(lam / 2, rel=1e-10)
    assert f.sharpe == pytest.approx(math.sqrt(inv.alpha * lam / (2 * inv.beta)), rel=1e-10)


@given(st.integers(0, 100_000))
def test_sharpe_fano_ordering(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    c, e = random_pd(rng, n), rng.standard_normal(n) + 0.3
    inv = scalar_invariants(c, e)
    if inv.gamma <= 0 or inv.gamma >= inv.alpha * inv.beta * (1 - 1e-9):
        return
    s, f = maximize_sharpe(c, e), maximize_fano(c, e)
    tol = 1e-10
    assert f.sharpe <= s.sharpe * (1 + tol) and s.sharpe == pytest.approx(inv.alpha, rel=1e-10)
    assert f.fano >= s.fano * (1 - tol) and s.fano == pytest.approx(inv.gamma, rel=1e-10)
    assert f.e_port <= s.e_port * (1 + tol) + tol
    assert f.v_port <= s.v_port * (1 + tol) + tol


@given(st.integers(0, 100_000), st.sampled_from(["sharpe", "fano", "power2", "exp", "custom"]))
def test_solution_invariants(seed, which):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    c, e = random_pd(rng, n), rng.standard_normal(n) + 0.5
    spec = {
        "sharpe": RatioSpec.sharpe(),
        "fano": RatioSpec.fano(),
        "power2": RatioSpec.power(2.0),
        "exp": RatioSpec.exp(1.5),
        "custom": RatioSpec.custom(lambda v: v + v * v, lambda v: 1 + 2 * v),
    }[which]
    try:
        sol = maximize(c, e, spec)
    except (InfeasibleError, DegenerateSolutionError):
        return
    inv = sol.invariants
    assert abs(sol.weights.sum() - 1) <= 1e-10
    rebuilt = sol.a * np.linalg.solve(c, e) + sol.b * np.linalg.solve(c, np.ones(n))
    np.testing.assert_allclose(sol.weights, rebuilt, rtol=1e-10, atol=1e-10 * np.abs(rebuilt).max())
    assert sol.e_port == pytest.approx(sol.weights @ e, rel=1e-12, abs=1e-14)
    assert sol.v_port == pytest.approx(sol.weights @ c @ sol.weights, rel=1e-12)
    assert stationarity_residual(sol, c, e) <= 1e-8 * max(1.0, abs(sol.mu))
    assert inv.gamma**2 <= inv.alpha2 * inv.beta2 * (1 + 1e-9)


@given(st.integers(0, 100_000))
@example(36829)
def test_grid_oracle_small_n(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    c, e = random_pd(rng, n), rng.standard_normal(n) + 0.5
    try:
        f = maximize_fano(c, e)
    except InfeasibleError:
        return
    val, _ = family_grid_max(c, e, lambda ee, v: ee / v)
    assert f.fano == pytest.approx(val, rel=1e-3)
    s = maximize_sharpe(c, e) if scalar_invariants(c, e).gamma > 0 else None
    if s is not None:
        val, _ = family_grid_max(c, e, lambda ee, v: ee / np.sqrt(v))
        assert s.sharpe == pytest.approx(val, rel=1e-3)
    if n == 2:
        val2, _ = two_asset_grid_max(c, e, lambda ee, v: ee / v)
        assert f.fano == pytest.approx(val2, rel=1e-3)


def test_power_two_matches_grid():
    sol = maximize_general(I2, [3.0, 1.0], RatioSpec.power(2.0))
    _, w = two_asset_grid_max(I2, np.array([3.0, 1.0]), lambda e, v: e / v**2, n_grid=2_000_001)
    np.testing.assert_allclose(sol.weights, w, atol=1e-4)
    assert sol.diagnostics["method"] == "quadratic"
    assert sol.diagnostics["V_root"] == pytest.approx(sol.v_port, rel=1e-10)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_exp_and_custom_match_grid(rng):
    c = random_pd(rng, 3)
    e = rng.standard_normal(3) + 0.8
    for spec, obj in [
        (RatioSpec.exp(0.7), lambda ee, v: ee / np.exp(0.7 * v)),
        (RatioSpec.custom(lambda v: v + v**3, lambda v: 1 + 3 * v**2), lambda ee, v: ee / (v + v**3)),
    ]:
        sol = maximize_general(c, e, spec)
        val, _ = family_grid_max(c, e, obj)
        assert sol.diagnostics["G"] == pytest.approx(val, rel=1e-6)


@given(st.integers(0, 100_000))
def test_special_case_reductions(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    c, e = random_pd(rng, n), rng.standard_normal(n) + 0.5
    inv = scalar_invariants(c, e)
    if inv.gamma <= 1e-6 or inv.alpha * inv.beta + inv.gamma <= 1e-6:
        return
    np.testing.assert_allclose(maximize_general(c, e, RatioSpec.power(0.5)).weights,
                               maximize_sharpe(c, e).weights, atol=1e-10)
    np.testing.assert_allclose(maximize_general(c, e, RatioSpec.custom(lambda v: v, lambda v: 1.0)).weights,
                               maximize_fano(c, e).weights, atol=1e-10)


def test_colinear_returns_give_min_variance(rng):
    c = random_pd(rng, 4)
    sol = maximize_general(c, 0.3 * np.ones(4), RatioSpec.power(2.0))
    mv = np.linalg.solve(c, np.ones(4))
    np.testing.assert_allclose(sol.weights, mv / mv.sum(), rtol=1e-10)
    assert sol.diagnostics["colinear"]


def test_sharpe_scale_invariance_and_fano_scaling(rng):
    c = random_pd(rng, 5)
    e = rng.standard_normal(5) + 0.5
    s = maximize_sharpe(c, e)
    s2 = maximize_sharpe(7.0 * c, 0.3 * e)
    np.testing.assert_allclose(s.weights, s2.weights, rtol=1e-10)
    assert s2.sharpe == pytest.approx(s.sharpe * 0.3 / math.sqrt(7.0), rel=1e-10)
    f, f2 = maximize_fano(c, e), maximize_fano(3.0 * c, e)
    assert f2.fano == pytest.approx(f.fano / 3.0, rel=1e-12)


def test_horizon_behaviour(rng):
    c = random_pd(rng, 4)
    e = rng.standard_normal(4)
    w = rng.standard_normal(4)
    one = evaluate_portfolio(w, c, e)
    t = 21
    many = evaluate_portfolio(w, t * c, t * e)
    assert many.F == pytest.approx(one.F, rel=1e-12)
    assert many.S == pytest.approx(one.S * math.sqrt(t), rel=1e-12)


def test_evaluate_portfolio_examples():
    st_ = evaluate_portfolio([1, 0], I2, [1, 5])
    assert (st_.E, st_.V, st_.S, st_.F, st_.kappa, st_.bubble) == (1, 1, 1, 1, 2, False)
    st_ = evaluate_portfolio([1, 0], I2, [0.4, 0])
    assert st_.kappa == pytest.approx(0.8) and st_.bubble
    for e1 in (0.3, 0.49, 0.51, 2.0):
        s = evaluate_portfolio([1.0], [[1.0]], [e1])
        assert s.bubble == (s.F < 0.5)
    with pytest.raises(DegenerateSolutionError):
        evaluate_portfolio([0, 0], I2, [1, 1])


def test_ratio_spec_validation():
    with pytest.raises(ValidationError):
        RatioSpec.power(0.0)
    with pytest.raises(ValidationError):
        RatioSpec.exp(-1.0)
    with pytest.raises(ValidationError):
        RatioSpec.custom(lambda v: -v, lambda v: -1.0)
    with pytest.raises(ValidationError):
        RatioSpec("bogus")


def test_non_pd_model_rejected():
    with pytest.raises(ModelError):
        scalar_invariants(np.ones((2, 2)), [1.0, 0.5])
    err = NumericalError("singular", condition=3.5e17)
    assert "condition estimate 3.500e+17" in str(err)


def test_active_subset(rng):
    c = random_pd(rng, 4)
    e = rng.standard_normal(4) + 1.0
    sub = maximize_fano(DenseCovariance(c), e, active=[0, 2])
    ref = maximize_fano(c[np.ix_([0, 2], [0, 2])], e[[0, 2]])
    np.testing.assert_allclose(sub.weights[[0, 2]], ref.weights, rtol=1e-10)
    assert sub.weights[1] == 0 and sub.weights[3] == 0


def test_solution_json_serializable():
    import json

    sol = maximize_general(I2, [3.0, 1.0], RatioSpec.power(2.0))
    text = json.dumps(sol.to_dict())
    assert "V_root" in text
