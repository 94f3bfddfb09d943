import time

import pytest

from eqbsde.bsde import TrainConfig, train
from eqbsde.market import FactorParams, MarketParams, TimeGrid
from eqbsde.strategy import Constraint, Regime, StrategyRegime

# Acceptance outcomes, filled by tests/test_acceptance.py and echoed in the summary.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

WIDE = Constraint(-10000.0, 10000.0)


@pytest.fixture
def mp():
    return MarketParams()


@pytest.fixture
def fp():
    return FactorParams()


@pytest.fixture
def grid():
    return TimeGrid(2.0, 40)


class SolverCache:
    """Trains each configuration at most once per session."""

    def __init__(self):
        self._store = {}

    def get(self, key, regime, mp, fp, grid, tc):
        if key not in self._store:
            t0 = time.perf_counter()
            solver, trace = train(regime, mp, fp, grid, tc)
            self._store[key] = (solver, trace, time.perf_counter() - t0)
        return self._store[key]


@pytest.fixture(scope="session")
def solvers():
    return SolverCache()


@pytest.fixture(scope="session")
def rho0_solver(solvers):
    """Base-parameter rho = 0 equilibrium, full 5000-epoch budget."""
    return solvers.get("rho0", StrategyRegime(Regime.RHO_ZERO), MarketParams(), FactorParams(), TimeGrid(),
                       TrainConfig(seed=0))


@pytest.fixture(scope="session")
def table1_solvers(solvers):
    mp = MarketParams(rho=-0.31, gamma=1.0)
    approx = solvers.get("t1-approx", StrategyRegime(Regime.APPROXIMATE), mp, FactorParams(), TimeGrid(),
                         TrainConfig(seed=0))
    con = solvers.get("t1-con", StrategyRegime(Regime.CONSTRAINED, WIDE), mp, FactorParams(), TimeGrid(),
                      TrainConfig(seed=0))
    return approx, con


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
