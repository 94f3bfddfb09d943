"""Market and factor parameters, Brownian drivers and factor simulation.

The stock has constant ``r`` and ``sigma`` and excess return
``sigma * theta(X)``; the factor ``X`` is a mean-reverting Gaussian process
whose drift is clamped to ``[-trunc, trunc]``.

Normal variates come from numpy's ``Generator.standard_normal`` (Ziggurat)
on a Philox bit generator. Streams are split with ``SeedSequence`` so a
given ``(seed, stream)`` pair always reproduces the same draws.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_TRUNC = 10000.0


@dataclass(frozen=True)
class MarketParams:
    r: float = 0.017
    sigma: float = 0.15
    zeta: float = 1.0
    gamma: float = 0.1
    rho: float = 0.0
    trunc: float = DEFAULT_TRUNC

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.trunc > 0:
            raise ValueError(f"trunc must be positive, got {self.trunc}")


@dataclass(frozen=True)
class FactorParams:
    lambda_: float = 0.27
    x_bar: float = 0.273
    nu: float = 0.065
    x0: float = 0.273
    trunc: float = DEFAULT_TRUNC

    def __post_init__(self):
        if not self.lambda_ >= 0:
            raise ValueError(f"lambda_ must be nonnegative, got {self.lambda_}")
        if not self.nu >= 0:
            raise ValueError(f"nu must be nonnegative, got {self.nu}")
        if not self.trunc > 0:
            raise ValueError(f"trunc must be positive, got {self.trunc}")

    def stationary_std(self) -> float:
        if self.lambda_ == 0:
            return math.inf
        return self.nu / math.sqrt(2.0 * self.lambda_)


@dataclass(frozen=True)
class TimeGrid:
    T: float = 2.0
    N: int = 40

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        n = int(round(t / self.dt))
        if not 0 <= n <= self.N or abs(n * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"t={t} is not on the grid (dt={self.dt})")
        return n


@dataclass
class PathBatch:
    dB: np.ndarray
    dBbar: np.ndarray
    X: np.ndarray
    seed: tuple = field(default=())

    @property
    def batch(self) -> int:
        return self.dB.shape[0]

    def to_csv(self, path) -> None:
        """Dump as long-format rows ``path_id, step, dB, dBbar, X``.

        Row ``step = n`` carries the increment over ``[t_n, t_{n+1})`` and
        ``X[n]``; the final step row has empty increments.
        """
        batch, N = self.dB.shape
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step", "dB", "dBbar", "X"])
            for p in range(batch):
                for n in range(N + 1):
                    if n < N:
                        w.writerow([p, n, repr(float(self.dB[p, n])), repr(float(self.dBbar[p, n])), repr(float(self.X[p, n]))])
                    else:
                        w.writerow([p, n, "", "", repr(float(self.X[p, n]))])


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *stream)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def theta(x, trunc: float = DEFAULT_TRUNC):
    """Market price of risk ``min(max(x, 0), trunc)``."""
    return np.minimum(np.maximum(x, 0.0), trunc)


def factor_drift(x, fp: FactorParams):
    return fp.lambda_ * np.clip(fp.x_bar - x, -fp.trunc, fp.trunc)


def correlated_increments(grid: TimeGrid, batch: int, rho: float, seed: int, stream: Sequence[int] = (),
                          steps: int | None = None):
    """Increments of ``(B, Bbar)`` with ``corr = rho``, each of shape ``(batch, steps)``."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [-1, 1], got {rho}")
    steps = grid.N if steps is None else steps
    rng = rng_for(seed, *stream)
    xi = rng.standard_normal((2, batch, steps))
    sq = math.sqrt(grid.dt)
    dB = sq * xi[0]
    if rho == 1.0:
        dBbar = dB.copy()
    elif rho == -1.0:
        dBbar = -dB
    else:
        dBbar = sq * (rho * xi[0] + math.sqrt(1.0 - rho * rho) * xi[1])
    return dB, dBbar


def simulate_factor(grid: TimeGrid, fp: FactorParams, dBbar: np.ndarray, x_start=None) -> np.ndarray:
    """Clamped Euler scheme for the factor; returns ``X`` of shape ``(batch, steps + 1)``."""
    batch, steps = dBbar.shape
    X = np.empty((batch, steps + 1))
    X[:, 0] = fp.x0 if x_start is None else x_start
    dt = grid.dt
    for n in range(steps):
        X[:, n + 1] = X[:, n] + factor_drift(X[:, n], fp) * dt + fp.nu * dBbar[:, n]
    return X


def make_paths(grid: TimeGrid, fp: FactorParams, batch: int, rho: float, seed: int,
               stream: Sequence[int] = ()) -> PathBatch:
    dB, dBbar = correlated_increments(grid, batch, rho, seed, stream)
    X = simulate_factor(grid, fp, dBbar)
    return PathBatch(dB, dBbar, X, seed=(int(seed), *stream))


def split_paths(grid: TimeGrid, fp: FactorParams, n_outer: int, n_inner: int, n0: int, rho: float,
                seed: int, stream: Sequence[int] = ()) -> PathBatch:
    """Paths that share an outer prefix on ``[0, t_n0]`` in groups of ``n_inner``.

    Row ``g * n_inner + k`` is inner draw ``k`` of outer path ``g``. Fresh
    increments are drawn after ``n0``; rows in one group are therefore
    samples from the conditional law given the state at ``t_n0``.
    """
    if not 0 <= n0 < grid.N:
        raise ValueError(f"split index {n0} outside [0, {grid.N})")
    dB_o, dBbar_o = correlated_increments(grid, n_outer, rho, seed, (*stream, 0), steps=n0) \
        if n0 > 0 else (np.zeros((n_outer, 0)), np.zeros((n_outer, 0)))
    X_o = simulate_factor(grid, fp, dBbar_o)
    n_tot = n_outer * n_inner
    dB_i, dBbar_i = correlated_increments(grid, n_tot, rho, seed, (*stream, 1), steps=grid.N - n0)
    x_start = np.repeat(X_o[:, -1], n_inner)
    X_i = simulate_factor(grid, fp, dBbar_i, x_start=x_start)
    dB = np.concatenate([np.repeat(dB_o, n_inner, axis=0), dB_i], axis=1)
    dBbar = np.concatenate([np.repeat(dBbar_o, n_inner, axis=0), dBbar_i], axis=1)
    X = np.concatenate([np.repeat(X_o[:, :-1], n_inner, axis=0), X_i], axis=1)
    return PathBatch(dB, dBbar, X, seed=(int(seed), *stream))


def drift_a(pi, x, mp: MarketParams):
    """Drift of the log return: ``r + sigma*theta(x)*pi - sigma^2 pi^2 / 2``."""
    sp = mp.sigma * pi
    return mp.r + theta(x, mp.trunc) * sp - 0.5 * sp * sp
