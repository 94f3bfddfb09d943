"""Monte-Carlo evaluation of strategies.

A *policy* exposes ``initial_state(batch)`` and
``step(n, x_n, state, dBbar_n) -> (u_n, next_state)`` where ``u = sigma*pi``;
policies that carry a BSDE value also expose ``observed_Y(n, state, x_n)``.
Every estimator simulates the log return on a :class:`PathBatch`, so two
strategies evaluated on the same batch share their Brownian draws.

Conditional quantities at time ``t`` use path splitting: ``n_outer`` prefixes
on ``[0, t]``, each continued by ``n_inner`` fresh draws. Per-group plug-in
estimates are averaged and their spread gives the standard error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bsde import BsdePolicy, BsdeSolver, TrainConfig, replay_strategy, train
from .market import FactorParams, MarketParams, PathBatch, TimeGrid, make_paths, split_paths, theta
from .oracle import PdeSolution
from .strategy import Regime, StrategyRegime, benchmark_u, regime_u


class NonFiniteReturn(FloatingPointError):
    def __init__(self, step: int, rows: np.ndarray):
        self.step = step
        self.rows = rows
        super().__init__(f"non-finite log return at step {step} on {rows.size} path(s), first rows {rows[:5].tolist()}")


# -- policies ------------------------------------------------------------

@dataclass
class ConstantPolicy:
    pi: float
    mp: MarketParams

    def initial_state(self, batch):
        return None

    def step(self, n, x, state, dBbar_n):
        return np.full(x.shape, self.mp.sigma * self.pi), None


@dataclass
class BenchmarkPolicy:
    """Variance-blind optimum ``u = theta / (zeta + 1)``."""
    mp: MarketParams

    def initial_state(self, batch):
        return None

    def step(self, n, x, state, dBbar_n):
        return benchmark_u(x, self.mp), None


@dataclass
class PdePolicy:
    """Markov feedback ``Y = f(t, X)``, ``Z = f_x nu``, ``Ztilde = g_x nu``."""
    pde: PdeSolution
    regime: StrategyRegime
    mp: MarketParams
    grid: TimeGrid
    y_shift: object = None

    def initial_state(self, batch):
        return None

    def _k(self, n):
        return self.pde.time_index(n * self.grid.dt)

    def step(self, n, x, state, dBbar_n):
        if n >= self.grid.N:
            return np.asarray(regime_u(self.regime, 0.0, 0.0, 0.0, x, self.mp)) + 0.0 * x, None
        k = self._k(n)
        Y = self.pde.at("f", k, x)
        Z = self.pde.at("fx", k, x) * self.pde.nu
        Zt = self.pde.at("gx", k, x) * self.pde.nu if self.pde.gx is not None else 0.0 * x
        return regime_u(self.regime, Y, Z, Zt, x, self.mp), None

    def observed_Y(self, n, state, x):
        Y = self.pde.at("f", self._k(n), x)
        return Y + (self.y_shift(n) if self.y_shift is not None else 0.0)


def as_policy(obj, **kw):
    if isinstance(obj, BsdeSolver):
        return BsdePolicy(obj, **kw)
    return obj


# -- simulation ----------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Add ``eta`` to ``pi`` on ``[t, t + eps)``."""
    t: float
    eps: float
    eta: float

    def steps(self, grid: TimeGrid) -> tuple[int, int]:
        n0 = grid.index_of(self.t)
        k = self.eps / grid.dt
        if abs(k - round(k)) > 1e-9 or round(k) < 1:
            raise ValueError(f"eps={self.eps} must be a positive multiple of dt={grid.dt}")
        n1 = n0 + int(round(k))
        if n1 > grid.N:
            raise ValueError("perturbation window extends past T")
        return n0, n1


def simulate_returns(policy, paths: PathBatch, mp: MarketParams, grid: TimeGrid,
                     perturb: PerturbationSpec | None = None, want_Y: bool = False):
    """Euler log return ``R`` of shape ``(batch, N + 1)`` with ``R_0 = 0``.

    With ``want_Y`` also returns the policy's observed ``Y`` on the grid.
    """
    policy = as_policy(policy)
    N, dt = grid.N, grid.dt
    X, dB = paths.X, paths.dB
    lo, hi = perturb.steps(grid) if perturb is not None else (0, 0)
    bump = mp.sigma * perturb.eta if perturb is not None else 0.0
    R = np.zeros((paths.batch, N + 1))
    Y = np.zeros((paths.batch, N + 1)) if want_Y else None
    state = policy.initial_state(paths.batch)
    for n in range(N):
        x = X[:, n]
        if want_Y:
            Y[:, n] = policy.observed_Y(n, state, x)
        u, state = policy.step(n, x, state, paths.dBbar[:, n])
        if lo <= n < hi:
            u = u + bump
        th = theta(x, mp.trunc)
        R[:, n + 1] = R[:, n] + (mp.r + th * u - 0.5 * u * u) * dt + u * dB[:, n]
        bad = ~np.isfinite(R[:, n + 1])
        if bad.any():
            raise NonFiniteReturn(n, np.flatnonzero(bad))
    if want_Y:
        Y[:, N] = policy.observed_Y(N, state, X[:, N])
        return R, Y
    return R


def _cara(D, zeta):
    return -np.exp(-zeta * D) / zeta


def _groups(R, n0, n_inner):
    D = R[:, -1] - R[:, n0]
    return D.reshape(-1, n_inner)


def _se(v):
    return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")


# -- objective -----------------------------------------------------------

@dataclass
class ObjectiveEstimate:
    t: float
    utility_term: float
    variance_term: float
    J: float
    utility_se: float
    variance_se: float
    J_se: float


def _group_J(D, mp):
    U = _cara(D, mp.zeta).mean(axis=1)
    V = D.var(axis=1, ddof=1)
    return U, V, U - 0.5 * mp.gamma * V


def split_batch(grid: TimeGrid, fp: FactorParams, mp: MarketParams, t: float, batch: int, seed: int,
                n_inner: int, stream=(3,)) -> tuple[PathBatch, int]:
    if batch % n_inner or batch // n_inner < 2:
        raise ValueError(f"batch {batch} must be at least two whole groups of {n_inner}")
    n0 = grid.index_of(t)
    return split_paths(grid, fp, batch // n_inner, n_inner, n0, mp.rho, seed, stream), n0


def estimate_J(policy, t: float, mp: MarketParams, fp: FactorParams, grid: TimeGrid, batch: int,
               seed: int, n_inner: int = 100) -> ObjectiveEstimate:
    paths, n0 = split_batch(grid, fp, mp, t, batch, seed, n_inner)
    D = _groups(simulate_returns(policy, paths, mp, grid), n0, n_inner)
    U, V, J = _group_J(D, mp)
    return ObjectiveEstimate(t, float(U.mean()), float(V.mean()), float(J.mean()), _se(U), _se(V), _se(J))


# -- perturbation gain ---------------------------------------------------

@dataclass
class GainEstimate:
    t: float
    eps: float
    eta: float
    rho: float
    gain: float
    stderr: float


def estimate_gain(spec: PerturbationSpec, policy, mp: MarketParams, fp: FactorParams, grid: TimeGrid,
                  batch: int, seed: int, n_inner: int = 100, base: np.ndarray | None = None,
                  paths: PathBatch | None = None) -> GainEstimate:
    """``(J(t, pi + eta 1_[t, t+eps)) - J(t, pi)) / eps`` on paired paths.

    ``base`` / ``paths`` let callers reuse one unperturbed simulation across
    several ``eta``.
    """
    spec.steps(grid)
    if paths is None:
        paths, n0 = split_batch(grid, fp, mp, spec.t, batch, seed, n_inner)
    else:
        n0 = grid.index_of(spec.t)
    if base is None:
        base = simulate_returns(policy, paths, mp, grid)
    pert = simulate_returns(policy, paths, mp, grid, perturb=spec)
    _, _, J0 = _group_J(_groups(base, n0, n_inner), mp)
    _, _, J1 = _group_J(_groups(pert, n0, n_inner), mp)
    d = (J1 - J0) / spec.eps
    return GainEstimate(spec.t, spec.eps, spec.eta, mp.rho, float(d.mean()), _se(d))


def gain_grid(policy, mp: MarketParams, fp: FactorParams, grid: TimeGrid, times, etas, eps: float,
              batch: int, seed: int, n_inner: int = 100) -> list[GainEstimate]:
    """Gains over a ``(t, eta)`` grid, one shared base simulation per ``t``."""
    out = []
    for i, t in enumerate(times):
        paths, _ = split_batch(grid, fp, mp, t, batch, seed ^ i, n_inner)
        base = simulate_returns(policy, paths, mp, grid)
        for eta in etas:
            out.append(estimate_gain(PerturbationSpec(t, eps, eta), policy, mp, fp, grid, batch, seed,
                                     n_inner, base=base, paths=paths))
    return out


def fit_rho_squared(gains_ref: list[GainEstimate], rho_ref: float) -> float:
    """Smallest ``C >= 0`` with ``gain <= C rho^2`` on every reference probe."""
    return max(0.0, max(g.gain for g in gains_ref) / (rho_ref * rho_ref))


# -- experiments -----------------------------------------------------------

def mean_pi(solver: BsdeSolver, paths: PathBatch) -> np.ndarray:
    return replay_strategy(solver, paths)["pi"].mean(axis=0)


@dataclass
class SweepResult:
    param: str
    values: list
    t: np.ndarray
    mean_pi: np.ndarray
    solvers: list = field(default_factory=list, repr=False)

    @property
    def time_avg(self) -> np.ndarray:
        return self.mean_pi.mean(axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"{self.param}={v!r}" for v in self.values]])
            for n, tn in enumerate(self.t):
                w.writerow([repr(float(tn)), *[repr(float(m)) for m in self.mean_pi[:, n]]])


def regime_for_rho(rho: float, regime: StrategyRegime) -> StrategyRegime:
    """The rho=0 closed-form regime applies only when the correlation vanishes."""
    if rho != 0.0 and regime.tag is Regime.RHO_ZERO:
        return StrategyRegime(Regime.APPROXIMATE)
    return regime


def sensitivity_sweep(param: str, values, regime: StrategyRegime, mp: MarketParams, fp: FactorParams,
                      grid: TimeGrid, tc: TrainConfig, n_paths: int = 1000, seed: int = 0,
                      solvers=None, log_every: int = 0, log=print) -> SweepResult:
    """Mean replayed ``pi`` per parameter value on one common path set.

    Solver ``i`` trains with seed ``tc.seed ^ i``; pass ``solvers`` to skip
    training.
    """
    if param not in ("gamma", "zeta", "rho"):
        raise ValueError(f"cannot sweep {param!r}")
    values = list(values)
    if values != sorted(values):
        raise ValueError("sweep values must be sorted ascending")
    means, trained = [], []
    for i, v in enumerate(values):
        mpi = replace(mp, **{param: v})
        if solvers is not None:
            s = solvers[i]
        else:
            reg = regime_for_rho(mpi.rho, regime)
            s, _ = train(reg, mpi, fp, grid, replace(tc, seed=tc.seed ^ i), log_every, log)
        paths = make_paths(grid, fp, n_paths, mpi.rho, seed, (2,))
        means.append(mean_pi(s, paths))
        trained.append(s)
    return SweepResult(param, values, grid.times, np.array(means), trained)


@dataclass
class VarianceComparison:
    t: np.ndarray
    eu_eq: np.ndarray
    eu_bench: np.ndarray
    var_eq: np.ndarray
    var_bench: np.ndarray
    d_eu_se: np.ndarray
    d_var_se: np.ndarray

    COLUMNS = ("t", "eu_eq", "eu_bench", "var_eq", "var_bench", "d_eu_se", "d_var_se")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([repr(float(v)) for v in row])


def variance_utility_comparison(policy, mp: MarketParams, fp: FactorParams, grid: TimeGrid, batch: int,
                                seed: int, n_inner: int = 100, benchmark=None) -> VarianceComparison:
    """Conditional utility and variance of ``R_T - R_t`` for ``policy`` and the
    variance-blind benchmark at every grid time before ``T``, on common paths."""
    bench = BenchmarkPolicy(mp) if benchmark is None else benchmark
    cols = {c: [] for c in VarianceComparison.COLUMNS}
    for n in range(grid.N):
        t = float(grid.times[n])
        paths, n0 = split_batch(grid, fp, mp, t, batch, seed ^ n, n_inner)
        De = _groups(simulate_returns(policy, paths, mp, grid), n0, n_inner)
        Db = _groups(simulate_returns(bench, paths, mp, grid), n0, n_inner)
        Ue, Ve, _ = _group_J(De, mp)
        Ub, Vb, _ = _group_J(Db, mp)
        for c, v in zip(VarianceComparison.COLUMNS,
                        (t, Ue.mean(), Ub.mean(), Ve.mean(), Vb.mean(), _se(Ue - Ub), _se(Ve - Vb))):
            cols[c].append(float(v))
    return VarianceComparison(**{c: np.array(v) for c, v in cols.items()})


@dataclass
class Table1Row:
    t: float
    approx: float
    constrained: float
    rel_err_permille: float
    # Diagnostic: mean of -exp(-zeta Y), the same comparison on the value side.
    neg_discount_approx: float = float("nan")
    neg_discount_constrained: float = float("nan")
    discount_rel_err_permille: float = float("nan")

    COLUMNS = ("t", "approx", "constrained", "rel_err_permille", "neg_discount_approx",
               "neg_discount_constrained", "discount_rel_err_permille")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


def _permille(a, c):
    return 1000.0 * abs(a - c) / abs(c) if a != c else 0.0


def table1_comparison(approx, constrained, paths: PathBatch, times=(0.0, 0.5, 1.0, 1.5, 2.0)) -> list[Table1Row]:
    """Mean ``pi`` of two solvers on common paths and their relative gap in per-mille."""
    grid = approx.grid
    ra, rc = replay_strategy(approx, paths), replay_strategy(constrained, paths)
    pa, pc = ra["pi"].mean(axis=0), rc["pi"].mean(axis=0)
    da = (-np.exp(-approx.mp.zeta * ra["Y"])).mean(axis=0)
    dc = (-np.exp(-constrained.mp.zeta * rc["Y"])).mean(axis=0)
    rows = []
    for t in times:
        n = grid.index_of(t)
        a, c = float(pa[n]), float(pc[n])
        rows.append(Table1Row(float(t), a, c, _permille(a, c), float(da[n]), float(dc[n]),
                              _permille(float(da[n]), float(dc[n]))))
    return rows


@dataclass
class MartingaleReport:
    t: np.ndarray
    mean_inc: np.ndarray
    mean_se: np.ndarray
    coef: np.ndarray
    tstat: np.ndarray

    @property
    def max_abs_t(self) -> float:
        return float(np.nanmax(np.abs(self.tstat)))

    def mean_z(self) -> np.ndarray:
        return np.abs(self.mean_inc) / self.mean_se


def martingale_residual(policy, paths: PathBatch, mp: MarketParams, grid: TimeGrid,
                        terminal_zero: bool = True, floor: float = 1e-12) -> MartingaleReport:
    """Drift test for ``M = exp(-zeta (R + Y))``.

    Increments ``M_{n+1} - M_n`` are regressed on ``(1, X_n, R_n)``; columns
    with (relative) variance below ``floor`` are dropped and get NaN
    statistics. ``terminal_zero`` uses the terminal condition ``Y_T = 0``
    instead of the rolled-forward value, so the last increment carries the
    terminal mismatch.
    """
    R, Y = simulate_returns(policy, paths, mp, grid, want_Y=True)
    if terminal_zero:
        Y[:, -1] = 0.0
    M = np.exp(-mp.zeta * (R + Y))
    dM = np.diff(M, axis=1)
    N, B = grid.N, paths.batch
    coef = np.full((N, 3), np.nan)
    tstat = np.full((N, 3), np.nan)
    mean_inc = dM.mean(axis=0)
    mean_se = dM.std(axis=0, ddof=1) / math.sqrt(B)
    for n in range(N):
        basis = np.column_stack([np.ones(B), paths.X[:, n], R[:, n]])
        keep = [0] + [j for j in (1, 2) if basis[:, j].std() > floor * max(1.0, np.abs(basis[:, j]).max())]
        A = basis[:, keep]
        # Centre the regressors so the intercept is the mean drift.
        A[:, 1:] -= A[:, 1:].mean(axis=0)
        beta, *_ = np.linalg.lstsq(A, dM[:, n], rcond=None)
        res = dM[:, n] - A @ beta
        s2 = res @ res / max(B - len(keep), 1)
        cov = s2 * np.linalg.inv(A.T @ A)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf))
        coef[n, keep] = beta
        tstat[n, keep] = t
    return MartingaleReport(grid.times[:-1], mean_inc, mean_se, coef, tstat)
