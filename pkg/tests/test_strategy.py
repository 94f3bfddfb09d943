import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqbsde.market import MarketParams
from eqbsde.strategy import (Constraint, Regime, StrategyRegime, benchmark_u, euler_step_Y, euler_step_Ytilde,
                             generator_Y, generator_Ytilde, project_interval, regime_u, u_hat_general, u_hat_rho0)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_u_hat_rho0_examples(mp):
    u = u_hat_rho0(0.0, 0.273, mp)
    assert u == pytest.approx(0.130000, abs=1e-12)
    assert u / mp.sigma == pytest.approx(0.866667, abs=1e-6)
    assert u_hat_rho0(0.0, 0.273, MarketParams(gamma=1e12)) < 1e-12
    b = MarketParams(gamma=0.0)
    assert u_hat_rho0(0.0, 0.273, b) == pytest.approx(0.273 / 2)
    assert u_hat_rho0(0.0, 0.273, b) == pytest.approx(benchmark_u(0.273, b))


def test_u_hat_general_examples():
    mp = MarketParams(gamma=1.0, rho=-0.31)
    assert u_hat_general(0.0, 0.1, 0.05, 0.273, mp) == pytest.approx(0.106500, abs=1e-12)
    assert u_hat_general(0.2, 0.0, 0.0, 0.273, mp) == pytest.approx(u_hat_rho0(0.2, 0.273, mp), rel=1e-15)


@given(Y=st.floats(-2, 2), Z=finite, Zt=finite, x=st.floats(-1, 5))
def test_general_reduces_at_rho_zero(Y, Z, Zt, x):
    mp = MarketParams()
    assert u_hat_general(Y, Z, Zt, x, mp) == pytest.approx(u_hat_rho0(Y, x, mp), rel=1e-14, abs=1e-300)


def test_projection_examples():
    assert project_interval(2.0, Constraint(-1, 1)) == 1.0
    assert project_interval(0.13, Constraint(-1500, 1500)) == 0.13
    assert project_interval(-0.5, Constraint(0, 1)) == 0.0
    assert Constraint(-1, 2).scaled(0.15) == Constraint(-0.15, 0.3)


def test_constraint_validation():
    with pytest.raises(ValueError):
        Constraint(1.0, 0.0)
    with pytest.raises(ValueError):
        Constraint(0.0, np.inf)
    with pytest.raises(ValueError):
        StrategyRegime(Regime.CONSTRAINED)
    with pytest.raises(ValueError):
        StrategyRegime(Regime.RHO_ZERO, Constraint(0, 1))


interval = st.tuples(finite, st.floats(0, 100)).map(lambda t: Constraint(t[0], t[0] + t[1]))


@given(c=interval, w1=finite, w2=finite)
def test_projection_nonexpansive(c, w1, w2):
    assert abs(project_interval(w1, c) - project_interval(w2, c)) <= abs(w1 - w2) + 1e-12


@settings(max_examples=300)
@given(c=interval, w=finite, frac=st.floats(0, 1), alpha=st.floats(1e-3, 1e3))
def test_projection_variational_inequality(c, w, frac, alpha):
    u = project_interval(w, c)
    target = c.lo + frac * (c.hi - c.lo)
    h = target - u
    lhs = abs(alpha * (w - u) - h)
    assert lhs >= alpha * abs(w - u) * (1 - 1e-12) - 1e-9


@settings(max_examples=300)
@given(c=interval, w=finite, frac=st.floats(0, 1), alpha=st.floats(0.51, 100))
def test_projection_strict_violation_at_lambda_one(c, w, frac, alpha):
    p = project_interval(w, c)
    u = c.lo + frac * (c.hi - c.lo)
    if abs(u - p) < 1e-6 * max(1.0, abs(p)):
        return
    h = 1.0 * (p - u)
    assert abs(alpha * (w - u) - h) < alpha * abs(w - u)


def test_wide_constraint_inactive(mp):
    rng = np.random.default_rng(0)
    Y, Z, Zt, x = rng.normal(0, 0.1, (4, 1000))
    m = MarketParams(rho=-0.31, gamma=1.0)
    reg = StrategyRegime(Regime.CONSTRAINED, Constraint(-10000, 10000))
    np.testing.assert_array_equal(regime_u(reg, Y, Z, Zt, x, m), u_hat_general(Y, Z, Zt, x, m))


def test_generator_examples(mp):
    assert generator_Y(0.0, 0.0, 0.273, mp) == pytest.approx(-mp.r)
    assert generator_Y(0.13, 0.2, 0.273, mp) == pytest.approx(-0.015590, abs=1e-9)
    assert generator_Ytilde(0.0, 0.273, mp) == pytest.approx(-mp.r)
    assert generator_Ytilde(0.13, 0.273, mp) == pytest.approx(-0.044040, abs=1e-9)
    assert generator_Ytilde(0.7, -1.0, mp) == pytest.approx(-mp.r + 0.7**2 / 2)


def test_generator_rho_one_drops_orthogonal_term():
    m = MarketParams(rho=1.0)
    u, Z, x = 0.1, 0.3, 0.273
    expected = 0.5 * (Z + u) ** 2 - (m.r + x * u - 0.5 * u * u)
    assert generator_Y(u, Z, x, m) == pytest.approx(expected, rel=1e-14)


@given(u=st.floats(-2, 2), Z=st.floats(-2, 2), x=st.floats(-1, 3), zeta=st.floats(0.1, 5))
def test_generator_rho0_closed_form(u, Z, x, zeta):
    m = MarketParams(zeta=zeta)
    th = min(max(x, 0.0), m.trunc)
    expected = (zeta + 1) / 2 * u * u + zeta / 2 * Z * Z - m.r - th * u
    assert generator_Y(u, Z, x, m) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    # General-rho code path evaluated at a rho that is numerically zero.
    m2 = MarketParams(zeta=zeta, rho=1e-300)
    assert generator_Y(u, Z, x, m2) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_euler_steps(mp):
    assert euler_step_Y(0.3, 0.0, 0.1, 0.273, 0.7, mp, 0.0) == 0.3
    # u=0.13, Z=0.2 gives drift -0.015590.
    assert euler_step_Y(0.0, 0.2, 0.13, 0.273, 0.05, mp, 0.01) == pytest.approx(0.009844, abs=1e-6)
    Y = 0.0
    for _ in range(40):
        Y = euler_step_Ytilde(Y, 0.0, 0.0, 0.273, 0.0, mp, 0.05)
    assert Y == pytest.approx(-mp.r * 2.0, rel=1e-12)


def test_regime_dispatch(mp):
    x = np.array([0.1, 0.273])
    np.testing.assert_array_equal(regime_u(StrategyRegime(Regime.RHO_ZERO), 0.0, 9.0, 9.0, x, mp),
                                  u_hat_rho0(0.0, x, mp))
    np.testing.assert_array_equal(regime_u(StrategyRegime(Regime.BENCHMARK), 0.0, 0.0, 0.0, x, mp), x / 2)
    tight = StrategyRegime(Regime.CONSTRAINED, Constraint(0.0, 0.5))
    assert np.all(regime_u(tight, 0.0, 0.0, 0.0, np.array([5.0]), mp) == pytest.approx(0.5 * mp.sigma))


def test_exp_guard(mp):
    with pytest.raises(AssertionError):
        u_hat_rho0(100.0, 0.273, mp)
