"""Non-neural reference solutions.

* :func:`solve_complete_ode`: classic RK4 for ``A = exp(-zeta*Y)`` in the
  complete market (constant ``theta``), integrated backward from ``A(T) = 1``.
* :func:`solve_pde_f` / :func:`solve_pde_g`: semi-implicit finite
  differences for the quasi-linear PDE of ``f`` (so ``Y_t = f(t, X_t)``) and
  the linear PDE of ``g`` (``Ytilde_t = g(t, X_t)``). Diffusion and transport
  are implicit, nonlinear terms lagged one time slice, lateral boundaries
  zero-slope.
* :func:`feynman_kac_check`: compares a trained solver's ``Y`` and ``Z``
  along simulated paths with ``f`` and ``f_x * nu``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .market import FactorParams, MarketParams, PathBatch, TimeGrid, factor_drift, theta
from .strategy import Constraint, generator_Y, generator_Ytilde, project_interval, u_hat_general


class OdeBreakdown(ArithmeticError):
    pass


class PdeConvergenceError(ArithmeticError):
    pass


class BoundaryInfluenceWarning(UserWarning):
    pass


# -- complete market ODE ---------------------------------------------------

@dataclass
class CompleteOdeSolution:
    t: np.ndarray
    A: np.ndarray
    pi_hat: np.ndarray
    zeta: float = 1.0

    @property
    def Y(self) -> np.ndarray:
        return -np.log(self.A) / self.zeta

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "A", "pi_hat"])
            for row in zip(self.t, self.A, self.pi_hat):
                w.writerow([repr(float(v)) for v in row])


def ode_growth(A, mp: MarketParams, theta_const: float):
    """Growth rate ``f(A)`` in ``A' = A f(A)``."""
    z, g, th2 = mp.zeta, mp.gamma, theta_const * theta_const
    d = (z + 1.0) * A + g
    return -z * (z + 1.0) * A * A * th2 / (2.0 * d * d) + z * A * th2 / d + mp.r * z


def solve_complete_ode(mp: MarketParams, theta_const: float, grid: TimeGrid) -> CompleteOdeSolution:
    if grid.N < 10:
        raise ValueError("the ODE oracle needs at least 10 steps")

    def rhs(A):
        return A * ode_growth(A, mp, theta_const)

    h = -grid.dt
    A = np.empty(grid.N + 1)
    A[grid.N] = 1.0
    for n in range(grid.N, 0, -1):
        a = A[n]
        k1 = rhs(a)
        k2 = rhs(a + 0.5 * h * k1)
        k3 = rhs(a + 0.5 * h * k2)
        k4 = rhs(a + h * k3)
        A[n - 1] = a + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not A[n - 1] > 0.0:
            raise OdeBreakdown(f"A became non-positive at step {n - 1}")
        # f(A) > 0 when r > 0, so the exact A decreases backward from 1.
        if A[n - 1] > a:
            raise OdeBreakdown(f"A increased backward at step {n - 1}; the step is too coarse for RK4 stability")
    u = A * theta_const / ((mp.zeta + 1.0) * A + mp.gamma)
    return CompleteOdeSolution(grid.times, A, u / mp.sigma, zeta=mp.zeta)


# -- finite-difference PDE solvers -----------------------------------------

@dataclass(frozen=True)
class PdeGrid:
    x_lo: float
    x_hi: float
    M: int
    N_t: int
    T: float = 2.0

    def __post_init__(self):
        if not self.x_hi > self.x_lo:
            raise ValueError("need x_hi > x_lo")
        if self.M < 4 or self.N_t < 1:
            raise ValueError("need M >= 4 and N_t >= 1")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.M

    @property
    def dt_pde(self) -> float:
        return self.T / self.N_t

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.M + 1)

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N_t + 1) * self.dt_pde

    @classmethod
    def around(cls, fp: FactorParams, T: float, M: int = 400, N_t: int = 1600, width: float = 8.0,
               x_lo: float | None = None, x_hi: float | None = None) -> "PdeGrid":
        """Domain ``x_bar +- width`` stationary standard deviations (plus ``x0``)."""
        sd = fp.stationary_std()
        if not math.isfinite(sd):
            if x_lo is None or x_hi is None:
                raise ValueError("give explicit bounds when the factor has no stationary law")
            return cls(x_lo, x_hi, M, N_t, T)
        sd = max(sd, 1e-3)
        lo = min(fp.x_bar, fp.x0) - width * sd if x_lo is None else x_lo
        hi = max(fp.x_bar, fp.x0) + width * sd if x_hi is None else x_hi
        return cls(lo, hi, M, N_t, T)

    def covers(self, fp: FactorParams, n_sd: float = 6.0) -> bool:
        sd = fp.stationary_std()
        if not math.isfinite(sd):
            return True
        return self.x_lo <= fp.x_bar - n_sd * sd and fp.x_bar + n_sd * sd <= self.x_hi


@dataclass
class PdeSolution:
    t: np.ndarray
    x: np.ndarray
    f: np.ndarray
    fx: np.ndarray
    g: np.ndarray | None = None
    gx: np.ndarray | None = None
    nu: float = 0.0

    def time_index(self, t: float) -> int:
        dt = self.t[1] - self.t[0]
        k = int(round(t / dt))
        if abs(self.t[k] - t) > 1e-9 * max(1.0, self.t[-1]):
            raise ValueError(f"t={t} is not on the PDE time grid")
        return k

    def at(self, name: str, k: int, xs) -> np.ndarray:
        """Linear interpolation of field ``name`` on time slice ``k``."""
        return np.interp(xs, self.x, getattr(self, name)[k])

    def inside(self, xs) -> np.ndarray:
        return (xs >= self.x[0]) & (xs <= self.x[-1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "f", "fx", "g", "gx"])
            for k, tk in enumerate(self.t):
                for i, xi in enumerate(self.x):
                    g = "" if self.g is None else repr(float(self.g[k, i]))
                    gx = "" if self.gx is None else repr(float(self.gx[k, i]))
                    w.writerow([repr(float(tk)), repr(float(xi)), repr(float(self.f[k, i])),
                                repr(float(self.fx[k, i])), g, gx])


class _Implicit:
    """Banded factor of ``I - dt * (m d/dx + nu^2/2 d^2/dx^2)`` with zero-slope edges."""

    def __init__(self, pgrid: PdeGrid, fp: FactorParams):
        x = pgrid.x
        dx, dt = pgrid.dx, pgrid.dt_pde
        m = factor_drift(x, fp)
        D = 0.5 * fp.nu * fp.nu
        lower = dt * (D / dx**2 - m / (2 * dx))
        upper = dt * (D / dx**2 + m / (2 * dx))
        diag = 1.0 + 2.0 * dt * D / dx**2 + np.zeros_like(x)
        ab = np.zeros((3, x.size))
        ab[0, 1:] = -upper[:-1]
        ab[1] = diag
        ab[2, :-1] = -lower[1:]
        # Ghost node mirrors the first interior node; transport cancels there.
        ab[0, 1] = -2.0 * dt * D / dx**2
        ab[2, -2] = -2.0 * dt * D / dx**2
        self.ab = ab

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve_banded((1, 1), self.ab, rhs)


def _dx(f: np.ndarray, dx: float) -> np.ndarray:
    return np.gradient(f, dx, edge_order=2)


def _phi(f, th, mp: MarketParams):
    A = np.exp(-mp.zeta * f)
    return A * th / ((mp.zeta + 1.0) * A + mp.gamma)


def _check_domain(pgrid: PdeGrid, fp: FactorParams, n_sd: float = 6.0) -> None:
    if not pgrid.covers(fp, n_sd):
        warnings.warn(f"PDE domain [{pgrid.x_lo:.3g}, {pgrid.x_hi:.3g}] does not cover x_bar +- {n_sd:g} "
                      "stationary standard deviations; zero-slope edges may bias the interior",
                      BoundaryInfluenceWarning, stacklevel=3)


def solve_pde_f(mp: MarketParams, fp: FactorParams, pgrid: PdeGrid, rho: float | None = None,
                terminal: float = 0.0, picard: int = 0, tol: float = 1e-12) -> PdeSolution:
    """Quasi-linear PDE for ``f``.

    ``f_t + m f_x + nu^2 f_xx / 2 = zeta rho nu f_x phi + zeta nu^2 f_x^2 / 2
    - r - theta phi + (zeta + 1) phi^2 / 2`` with
    ``phi = e^{-zeta f} theta / ((zeta + 1) e^{-zeta f} + gamma)``.
    ``picard > 0`` re-evaluates the nonlinear terms on the new slice until
    the update is below ``tol``.
    """
    rho = mp.rho if rho is None else rho
    x, dx, dt = pgrid.x, pgrid.dx, pgrid.dt_pde
    th = theta(x, mp.trunc)
    nu, z = fp.nu, mp.zeta
    speed = abs(z * rho * nu) * np.max(th) / (z + 1.0)
    if speed * dt > dx:
        raise ValueError(f"explicit transport CFL violated: {speed * dt / dx:.2f} > 1")
    _check_domain(pgrid, fp)
    op = _Implicit(pgrid, fp)

    def source(f):
        fx = _dx(f, dx)
        fx[0] = fx[-1] = 0.0
        ph = _phi(f, th, mp)
        return z * rho * fx * nu * ph + 0.5 * z * fx * fx * nu * nu - mp.r - th * ph + 0.5 * (z + 1.0) * ph * ph

    F = np.empty((pgrid.N_t + 1, x.size))
    F[-1] = terminal
    for k in range(pgrid.N_t - 1, -1, -1):
        f_next = F[k + 1]
        new = op.solve(f_next - dt * source(f_next))
        for it in range(picard):
            upd = op.solve(f_next - dt * source(new))
            delta = np.max(np.abs(upd - new))
            new = upd
            if delta < tol:
                break
            if it == picard - 1:
                raise PdeConvergenceError(f"Picard iteration stalled at slice {k} (update {delta:.2e})")
        F[k] = new
    FX = np.gradient(F, dx, axis=1, edge_order=2)
    return PdeSolution(pgrid.t, x, F, FX, nu=nu)


def solve_pde_g(mp: MarketParams, fp: FactorParams, pgrid: PdeGrid, f_solution: PdeSolution) -> PdeSolution:
    """Linear PDE ``g_t + m g_x + nu^2 g_xx / 2 = -r - theta phi(f) + phi(f)^2 / 2``, ``g(T) = 0``."""
    if f_solution.f.shape != (pgrid.N_t + 1, pgrid.M + 1):
        raise ValueError("f_solution is on a different grid")
    x, dx, dt = pgrid.x, pgrid.dx, pgrid.dt_pde
    th = theta(x, mp.trunc)
    _check_domain(pgrid, fp)
    op = _Implicit(pgrid, fp)
    G = np.empty_like(f_solution.f)
    G[-1] = 0.0
    for k in range(pgrid.N_t - 1, -1, -1):
        ph = _phi(f_solution.f[k + 1], th, mp)
        G[k] = op.solve(G[k + 1] - dt * (-mp.r - th * ph + 0.5 * ph * ph))
    GX = np.gradient(G, dx, axis=1, edge_order=2)
    return PdeSolution(f_solution.t, x, f_solution.f, f_solution.fx, G, GX, nu=fp.nu)


def solve_pde_coupled(mp: MarketParams, fp: FactorParams, pgrid: PdeGrid, constraint: Constraint) -> PdeSolution:
    """PDE pair for the constrained equilibrium, solved jointly slice by slice.

    ``u = P_{sigma A}(w(f, f_x nu, g_x nu))`` couples both equations; the
    generators are the same as in the BSDE recursion.
    """
    x, dx, dt = pgrid.x, pgrid.dx, pgrid.dt_pde
    nu = fp.nu
    _check_domain(pgrid, fp)
    op = _Implicit(pgrid, fp)
    box = constraint.scaled(mp.sigma)
    F = np.empty((pgrid.N_t + 1, x.size))
    G = np.empty_like(F)
    F[-1] = 0.0
    G[-1] = 0.0
    for k in range(pgrid.N_t - 1, -1, -1):
        f, g = F[k + 1], G[k + 1]
        Z = _dx(f, dx) * nu
        Zt = _dx(g, dx) * nu
        Z[0] = Z[-1] = Zt[0] = Zt[-1] = 0.0
        u = project_interval(u_hat_general(f, Z, Zt, x, mp), box)
        F[k] = op.solve(f - dt * generator_Y(u, Z, x, mp))
        G[k] = op.solve(g - dt * generator_Ytilde(u, x, mp))
    FX = np.gradient(F, dx, axis=1, edge_order=2)
    GX = np.gradient(G, dx, axis=1, edge_order=2)
    return PdeSolution(pgrid.t, x, F, FX, G, GX, nu=nu)


# -- Feynman-Kac comparison ------------------------------------------------

@dataclass
class FkReport:
    t: np.ndarray
    rms_Y: np.ndarray
    max_Y: np.ndarray
    rms_Z: np.ndarray
    max_Z: np.ndarray
    excluded: float

    def rows(self):
        for k in range(self.t.size):
            yield (self.t[k], self.rms_Y[k], self.max_Y[k], self.rms_Z[k], self.max_Z[k])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "rms_Y", "max_Y", "rms_Z", "max_Z"])
            for row in self.rows():
                w.writerow([repr(float(v)) for v in row])


def pde_trajectories(pde: PdeSolution, paths: PathBatch, grid: TimeGrid) -> dict:
    """``Y_n = f(t_n, X_n)`` and ``Z_n = f_x(t_n, X_n) * nu`` read off the grid."""
    Y = np.empty((paths.batch, grid.N + 1))
    Z = np.empty((paths.batch, grid.N))
    for n in range(grid.N + 1):
        k = pde.time_index(n * grid.dt)
        Y[:, n] = pde.at("f", k, paths.X[:, n])
        if n < grid.N:
            Z[:, n] = pde.at("fx", k, paths.X[:, n]) * pde.nu
    return {"Y": Y, "Z": Z}


def feynman_kac_check(solver, pde: PdeSolution, paths: PathBatch, mp: MarketParams, grid: TimeGrid) -> FkReport:
    """Per-slice RMS and max of ``Y - f`` and ``Z - f_x nu``.

    ``solver`` is a trained :class:`~eqbsde.bsde.BsdeSolver` or another
    :class:`PdeSolution` (replayed through its own grid). Paths leaving the
    PDE domain are excluded and counted.
    """
    from .bsde import BsdeSolver, replay_strategy

    if isinstance(solver, BsdeSolver):
        rec = replay_strategy(solver, paths)
    elif isinstance(solver, PdeSolution):
        rec = pde_trajectories(solver, paths, grid)
    else:
        raise TypeError(f"cannot replay {type(solver).__name__}")
    ref = pde_trajectories(pde, paths, grid)
    keep = np.all(pde.inside(paths.X), axis=1)
    if not keep.any():
        raise ValueError("every path left the PDE domain")
    dY = (rec["Y"] - ref["Y"])[keep]
    dZ = (rec["Z"] - ref["Z"])[keep]
    rmsZ = np.sqrt(np.mean(dZ * dZ, axis=0))
    maxZ = np.max(np.abs(dZ), axis=0)
    return FkReport(grid.times, np.sqrt(np.mean(dY * dY, axis=0)), np.max(np.abs(dY), axis=0),
                    np.append(rmsZ, np.nan), np.append(maxZ, np.nan), float(1.0 - keep.mean()))
