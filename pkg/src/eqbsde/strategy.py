"""Equilibrium strategy formulas, BSDE generators and the interval projection.

Everything here is written in terms of the amount-volatility ``u = sigma*pi``
and is valid for numpy arrays and :class:`eqbsde.autodiff.Tensor` alike.
Generators are the drifts of the forward Euler recursion
``Y_{n+1} = Y_n + drift * dt + Z_n * dBbar_n`` with terminal target 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import value
from .market import MarketParams, theta

EXP_GUARD = 50.0


class Regime(str, Enum):
    RHO_ZERO = "RhoZero"
    CONSTRAINED = "Constrained"
    APPROXIMATE = "Approximate"
    COMPLETE_MARKET = "CompleteMarket"
    BENCHMARK = "Benchmark"


@dataclass(frozen=True)
class Constraint:
    """Closed interval ``[lo, hi]`` of admissible strategy values ``pi``.

    Only boxes in one dimension are implemented; an n-D box would clip each
    coordinate independently with the same code.
    """

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError("constraint bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"empty constraint [{self.lo}, {self.hi}]")

    def scaled(self, sigma: float) -> "Constraint":
        return Constraint(sigma * self.lo, sigma * self.hi)


@dataclass(frozen=True)
class StrategyRegime:
    tag: Regime
    constraint: Constraint | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", Regime(self.tag))
        if self.tag is Regime.CONSTRAINED and self.constraint is None:
            raise ValueError("the Constrained regime needs a constraint")
        if self.tag is not Regime.CONSTRAINED and self.constraint is not None:
            raise ValueError(f"regime {self.tag.value} takes no constraint")

    @property
    def coupled(self) -> bool:
        return self.tag is Regime.CONSTRAINED


def _discount(Y, zeta):
    # e^{-zeta Y}; Y stays O(1) for sane inputs.
    assert np.all(np.abs(zeta * value(Y)) < EXP_GUARD), "zeta*Y outside the exp guard"
    return np.exp(-zeta * Y)


def u_hat_rho0(Y, x, mp: MarketParams):
    A = _discount(Y, mp.zeta)
    return A * theta(x, mp.trunc) / ((mp.zeta + 1.0) * A + mp.gamma)


def u_hat_general(Y, Z, Ztilde, x, mp: MarketParams):
    """Unprojected coupled-system target including the correlation terms."""
    A = _discount(Y, mp.zeta)
    num = A * theta(x, mp.trunc) - mp.zeta * A * mp.rho * Z - mp.gamma * mp.rho * Ztilde
    return num / ((mp.zeta + 1.0) * A + mp.gamma)


def project_interval(w, c: Constraint):
    """Orthogonal projection of ``w`` onto ``[c.lo, c.hi]``.

    Callers pass the sigma-scaled constraint when projecting ``u``.
    """
    return np.minimum(np.maximum(w, c.lo), c.hi)


def drift_a_u(u, x, mp: MarketParams):
    """Log-return drift written in ``u``: ``r + theta*u - u^2/2``."""
    return mp.r + theta(x, mp.trunc) * u - 0.5 * (u * u)


def generator_Y(u, Z, x, mp: MarketParams):
    rho = mp.rho
    zz = Z * Z
    if rho == 0.0:
        quad = (0.5 * mp.zeta) * (u * u + zz)
    else:
        v = rho * Z + u
        quad = (0.5 * mp.zeta) * (v * v + (1.0 - rho * rho) * zz)
    return quad - drift_a_u(u, x, mp)


def generator_Ytilde(u, x, mp: MarketParams):
    return -drift_a_u(u, x, mp)


def euler_step_Y(Y_n, Z_n, u_n, x_n, dBbar_n, mp: MarketParams, dt: float):
    return Y_n + generator_Y(u_n, Z_n, x_n, mp) * dt + Z_n * dBbar_n


def euler_step_Ytilde(Yt_n, Zt_n, u_n, x_n, dBbar_n, mp: MarketParams, dt: float):
    return Yt_n + generator_Ytilde(u_n, x_n, mp) * dt + Zt_n * dBbar_n


def regime_u(regime: StrategyRegime, Y, Z, Ztilde, x, mp: MarketParams):
    """Amount-volatility ``u`` prescribed by ``regime`` at one time step."""
    tag = regime.tag
    if tag in (Regime.RHO_ZERO, Regime.APPROXIMATE, Regime.COMPLETE_MARKET):
        return u_hat_rho0(Y, x, mp)
    if tag is Regime.CONSTRAINED:
        w = u_hat_general(Y, Z, Ztilde, x, mp)
        return project_interval(w, regime.constraint.scaled(mp.sigma))
    if tag is Regime.BENCHMARK:
        return benchmark_u(x, mp)
    raise ValueError(f"unknown regime {tag}")


def benchmark_u(x, mp: MarketParams):
    """Pure-utility optimum (variance weight zero): ``theta / (zeta + 1)``."""
    return theta(x, mp.trunc) / (mp.zeta + 1.0)
