import numpy as np
import pytest

from eqbsde.bsde import (BsdePolicy, NonFiniteError, TrainConfig, backprop_loss, finite_difference_check,
                         load_checkpoint, loss_value, new_solver, replay_strategy, save_checkpoint, train)
from eqbsde.market import FactorParams, MarketParams, TimeGrid, make_paths
from eqbsde.strategy import Constraint, Regime, StrategyRegime, generator_Y, u_hat_rho0

# Factor pinned far below zero so theta(X) = 0 on every path.
FLAT = FactorParams(x_bar=-10.0, x0=-10.0)


def _zero_nets(solver):
    for k, v in solver.params.items():
        if k.split(".")[-1] in ("W3", "b3") or k in ("z0", "zt0"):
            solver.params[k] = np.zeros_like(v)
    return solver


def test_solver_layout(grid, mp):
    s = new_solver(StrategyRegime(Regime.RHO_ZERO), mp, grid, TrainConfig())
    assert s.params["z.W1"].shape[0] == grid.N - 1
    assert set(k for k in s.params if "." not in k) == {"y0", "z0"}
    c = new_solver(StrategyRegime(Regime.CONSTRAINED, Constraint(-1, 1)), MarketParams(rho=-0.3), grid, TrainConfig())
    assert {"yt0", "zt0"} <= set(c.params)
    assert c.params["z.W3"].shape == (grid.N - 1, 2, 11)
    c2 = new_solver(StrategyRegime(Regime.CONSTRAINED, Constraint(-1, 1)), MarketParams(rho=-0.3), grid,
                    TrainConfig(joint_head=False))
    assert c2.heads == ("z", "zt")


def test_new_solver_rejects(grid):
    with pytest.raises(ValueError, match="rho = 0"):
        new_solver(StrategyRegime(Regime.RHO_ZERO), MarketParams(rho=0.2), grid, TrainConfig())
    with pytest.raises(ValueError):
        new_solver(StrategyRegime(Regime.BENCHMARK), MarketParams(gamma=0.0), grid, TrainConfig())


def test_sign_oracle_flat_market(grid):
    """With theta = 0 and Z = 0 the residual is y0 - rT, so y0* = +rT."""
    mp = MarketParams(r=0.017)
    s = _zero_nets(new_solver(StrategyRegime(Regime.RHO_ZERO), mp, grid, TrainConfig()))
    paths = make_paths(grid, FLAT, 16, 0.0, seed=0)
    rT = mp.r * grid.T
    for y0 in (0.0, 0.02, rT, 0.05):
        s.params["y0"] = np.array(y0)
        assert loss_value(s, paths) == pytest.approx((y0 - rT) ** 2, abs=1e-15)
    s.params["y0"] = np.array(rT)
    _, grads = backprop_loss(s, paths)
    assert abs(grads["y0"]) < 1e-12


def test_stationary_point_r_zero(grid):
    # r must be positive for the market; use a tiny r and compare against it.
    mp = MarketParams(r=1e-12)
    s = _zero_nets(new_solver(StrategyRegime(Regime.RHO_ZERO), mp, grid, TrainConfig()))
    s.params["y0"] = np.array(mp.r * grid.T)
    loss, grads = backprop_loss(s, make_paths(grid, FLAT, 8, 0.0, seed=1))
    assert loss < 1e-30
    assert abs(grads["y0"]) < 1e-15


@pytest.mark.parametrize("regime,mp", [
    (StrategyRegime(Regime.RHO_ZERO), MarketParams()),
    (StrategyRegime(Regime.APPROXIMATE), MarketParams(rho=-0.31)),
    (StrategyRegime(Regime.CONSTRAINED, Constraint(-1e4, 1e4)), MarketParams(rho=-0.31, gamma=1.0)),
])
def test_gradient_matches_finite_differences(regime, mp):
    g = TimeGrid(2.0, 4)
    s = new_solver(regime, mp, g, TrainConfig(seed=3))
    s.params["y0"] = np.array(0.05)
    worst, n = finite_difference_check(s, make_paths(g, FactorParams(), 8, mp.rho, seed=7))
    assert n > 500
    assert worst <= 1e-4


def test_gradient_separate_heads():
    g = TimeGrid(2.0, 4)
    mp = MarketParams(rho=-0.5)
    s = new_solver(StrategyRegime(Regime.CONSTRAINED, Constraint(-1e4, 1e4)), mp, g, TrainConfig(joint_head=False))
    worst, _ = finite_difference_check(s, make_paths(g, FactorParams(), 8, mp.rho, seed=2))
    assert worst <= 1e-4


def test_nonfinite_reports_step(grid, mp):
    s = new_solver(StrategyRegime(Regime.RHO_ZERO), mp, grid, TrainConfig())
    s.params["z0"] = np.array(np.nan)
    with pytest.raises(NonFiniteError) as e:
        backprop_loss(s, make_paths(grid, FactorParams(), 4, 0.0, seed=0))
    assert e.value.step == 0


def test_replay_zero_nets_matches_recursion(grid, mp, fp):
    s = _zero_nets(new_solver(StrategyRegime(Regime.RHO_ZERO), mp, grid, TrainConfig()))
    # Zero output layers still leave batch-norm running stats irrelevant.
    paths = make_paths(grid, fp, 5, 0.0, seed=4)
    rec = replay_strategy(s, paths)
    Y = np.zeros(5)
    for n in range(grid.N):
        u = u_hat_rho0(Y, paths.X[:, n], mp)
        np.testing.assert_allclose(rec["u"][:, n], u, rtol=1e-14)
        Y = Y + generator_Y(u, 0.0, paths.X[:, n], mp) * grid.dt
    np.testing.assert_allclose(rec["Y"][:, -1], Y, rtol=1e-13)
    np.testing.assert_allclose(rec["pi"], rec["u"] / mp.sigma)
    again = replay_strategy(s, paths)
    for k in rec:
        np.testing.assert_array_equal(rec[k], again[k])


def test_policy_stepping_matches_replay(grid, mp, fp):
    s, _ = train(StrategyRegime(Regime.RHO_ZERO), mp, fp, grid, TrainConfig(epochs=20, seed=5))
    paths = make_paths(grid, fp, 32, 0.0, seed=6)
    rec = replay_strategy(s, paths)
    pol = BsdePolicy(s)
    state = pol.initial_state(32)
    for n in range(grid.N + 1):
        np.testing.assert_allclose(pol.observed_Y(n, state), rec["Y"][:, n], rtol=1e-12, atol=1e-14)
        u, state = pol.step(n, paths.X[:, n], state, paths.dBbar[:, n] if n < grid.N else None)
        np.testing.assert_allclose(u, rec["u"][:, n], rtol=1e-12, atol=1e-14)


def test_checkpoint_roundtrip(tmp_path, grid, fp):
    mp = MarketParams(rho=-0.31, gamma=1.0)
    s, _ = train(StrategyRegime(Regime.CONSTRAINED, Constraint(-3, 3)), mp, fp, grid, TrainConfig(epochs=5, seed=1))
    save_checkpoint(s, tmp_path / "c.json")
    t = load_checkpoint(tmp_path / "c.json")
    assert t.regime == s.regime and t.mp == s.mp and t.grid == s.grid and t.spec == s.spec
    for k in s.params:
        np.testing.assert_array_equal(np.asarray(s.params[k]), np.asarray(t.params[k]))
    paths = make_paths(grid, fp, 16, mp.rho, seed=2)
    a, b = replay_strategy(s, paths), replay_strategy(t, paths)
    np.testing.assert_array_equal(a["u"], b["u"])
    with pytest.raises(ValueError):
        (tmp_path / "bad.json").write_text('{"format": "other"}')
        load_checkpoint(tmp_path / "bad.json")


def test_training_deterministic(grid, mp, fp):
    a = train(StrategyRegime(Regime.RHO_ZERO), mp, fp, grid, TrainConfig(epochs=15, seed=9))
    b = train(StrategyRegime(Regime.RHO_ZERO), mp, fp, grid, TrainConfig(epochs=15, seed=9))
    assert a[1].loss == b[1].loss
    for k in a[0].params:
        np.testing.assert_array_equal(a[0].params[k], b[0].params[k])


def test_flat_market_training_recovers_rT(grid):
    mp = MarketParams()
    s, tr = train(StrategyRegime(Regime.RHO_ZERO), mp, FLAT, grid, TrainConfig(epochs=500, seed=1))
    assert abs(s.y0 - mp.r * grid.T) < 1e-3
    assert all(np.isfinite(tr.loss)) and min(tr.loss) >= 0


def test_approximate_continuous_at_rho_zero(grid, fp):
    tc = TrainConfig(epochs=200, seed=2)
    a, _ = train(StrategyRegime(Regime.APPROXIMATE), MarketParams(rho=0.0), fp, grid, tc)
    b, _ = train(StrategyRegime(Regime.APPROXIMATE), MarketParams(rho=1e-9), fp, grid, tc)
    paths = make_paths(grid, fp, 256, 0.0, seed=3)
    np.testing.assert_allclose(replay_strategy(a, paths)["pi"], replay_strategy(b, paths)["pi"], atol=1e-3)


def test_trace_csv_and_smoothing(tmp_path, grid, mp, fp):
    _, tr = train(StrategyRegime(Regime.RHO_ZERO), mp, fp, grid, TrainConfig(epochs=12, seed=0))
    tr.to_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,lr" and len(lines) == 13
    assert tr.smoothed(5)[0] == pytest.approx(np.mean(tr.loss[:5]))
    assert len(tr.wall) == 12
