"""Deep-BSDE solvers for the three trainable regimes.

The initial values ``y0, z0`` (plus ``yt0, zt0`` for the coupled
constrained system) are trainable scalars. ``Z_n`` for ``n = 1..N-1`` comes
from one small network per step fed with ``X_n``. ``Y`` is rolled forward by
Euler with the regime's strategy coupling, and the loss is the mean squared
terminal residual.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, value
from .market import FactorParams, MarketParams, PathBatch, TimeGrid, make_paths
from .nn import DEFAULT_LR_STAGES, Adam, MlpSpec, init_mlp, lr_at, mlp_forward, update_running_stats
from .strategy import (Constraint, Regime, StrategyRegime, euler_step_Y, euler_step_Ytilde,
                       regime_u)

CHECKPOINT_FORMAT = "eqbsde-checkpoint"
CHECKPOINT_VERSION = 1
TRAINABLE = (Regime.RHO_ZERO, Regime.APPROXIMATE, Regime.CONSTRAINED)


class NonFiniteError(FloatingPointError):
    def __init__(self, step: int, what: str = "Y"):
        super().__init__(f"non-finite {what} at time step {step}")
        self.step = step


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, trace: "TrainTrace"):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch: int = 512
    lr_stages: tuple = DEFAULT_LR_STAGES
    stage_boundaries: tuple | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    resample: bool = True
    hidden_dims: tuple = (11, 11)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    out_scale: float = 0.1
    joint_head: bool = True

    def __post_init__(self):
        flat = [v for stage in self.lr_stages for v in stage]
        if any(b > a for a, b in zip(flat[:-1], flat[1:])):
            raise ValueError("learning-rate schedule must be non-increasing")
        if self.epochs < 1 or self.batch < 2:
            raise ValueError("need epochs >= 1 and batch >= 2")


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.loss)
        w = min(window, len(x))
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[w:] - c[:-w]) / w

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr"])
            for i, (l, r) in enumerate(zip(self.loss, self.lr)):
                w.writerow([i, repr(float(l)), repr(float(r))])


@dataclass
class BsdeSolver:
    regime: StrategyRegime
    mp: MarketParams
    grid: TimeGrid
    spec: MlpSpec
    params: dict
    stats: dict
    heads: tuple = ("z",)

    @property
    def steps(self) -> int:
        return self.grid.N - 1

    @property
    def y0(self) -> float:
        return float(self.params["y0"])

    @property
    def z0(self) -> float:
        return float(self.params["z0"])

    def net_params(self, head: str) -> dict:
        pre = head + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def net_stats(self, head: str) -> dict:
        pre = head + "."
        return {k[len(pre):]: v for k, v in self.stats.items() if k.startswith(pre)}


def new_solver(regime: StrategyRegime, mp: MarketParams, grid: TimeGrid, tc: TrainConfig) -> BsdeSolver:
    if regime.tag not in TRAINABLE:
        raise ValueError(f"regime {regime.tag.value} has no trainable BSDE")
    if regime.tag is Regime.RHO_ZERO and mp.rho != 0.0:
        raise ValueError("the RhoZero regime requires rho = 0")
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 7]))
    if regime.coupled:
        heads = (("z", 2),) if tc.joint_head else (("z", 1), ("zt", 1))
    else:
        heads = (("z", 1),)
    params = {"y0": np.array(0.0), "z0": np.array(0.0)}
    if regime.coupled:
        params.update(yt0=np.array(0.0), zt0=np.array(0.0))
    stats = {}
    spec = None
    steps = max(grid.N - 1, 0)
    for name, out_dim in heads:
        spec = MlpSpec(1, tuple(tc.hidden_dims), out_dim, tc.bn_eps, tc.bn_momentum, tc.out_scale)
        p, s = init_mlp(spec, steps, rng)
        params.update({f"{name}.{k}": v for k, v in p.items()})
        stats.update({f"{name}.{k}": v for k, v in s.items()})
    return BsdeSolver(regime, mp, grid, spec, params, stats, tuple(h for h, _ in heads))


def _step_outputs(solver: BsdeSolver, params: dict, X: np.ndarray, mode: str, batch_stats: dict | None):
    """Per-step ``(Z, Ztilde)`` sequences for ``n = 0..N-1``."""
    N = solver.grid.N
    coupled = solver.regime.coupled
    Z = [params["z0"]]
    Zt = [params["zt0"]] if coupled else [None]
    if N > 1:
        inp = X[:, 1:N].T[:, None, :]
        outs = {}
        for head in solver.heads:
            pre = head + "."
            hp = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
            bs = {} if batch_stats is not None else None
            outs[head] = mlp_forward(hp, inp, solver.spec, mode, solver.net_stats(head), bs)
            if bs is not None:
                batch_stats.update({f"{pre}{k}": v for k, v in bs.items()})
        for n in range(1, N):
            Z.append(outs["z"][n - 1, 0])
            if coupled:
                Zt.append(outs["z"][n - 1, 1] if "zt" not in outs else outs["zt"][n - 1, 0])
            else:
                Zt.append(None)
    return Z, Zt


def rollout(solver: BsdeSolver, params: dict, paths: PathBatch, mode: str = "train",
            batch_stats: dict | None = None, record: bool = False):
    """Euler roll of ``Y`` (and ``Ytilde``) over the whole grid.

    Returns ``(Y_N, Yt_N, records)``; ``records`` is a dict of per-step
    numpy arrays when ``record`` is set.
    """
    mp, grid, regime = solver.mp, solver.grid, solver.regime
    coupled = regime.coupled
    dt = grid.dt
    X, dBbar = paths.X, paths.dBbar
    if X.shape[1] != grid.N + 1 or dBbar.shape[1] != grid.N:
        raise ValueError("path batch does not match the time grid")
    Z, Zt = _step_outputs(solver, params, X, mode, batch_stats)
    zeros = np.zeros(paths.batch)
    Y = params["y0"] + zeros
    Yt = params["yt0"] + zeros if coupled else None
    rec = {k: [] for k in ("Y", "Z", "u", "Yt", "Zt")} if record else None
    for n in range(grid.N):
        x = X[:, n]
        u = regime_u(regime, Y, Z[n], Zt[n], x, mp)
        if record:
            rec["Y"].append(value(Y) + zeros)
            rec["Z"].append(value(Z[n]) + zeros)
            rec["u"].append(value(u) + zeros)
            if coupled:
                rec["Yt"].append(value(Yt) + zeros)
                rec["Zt"].append(value(Zt[n]) + zeros)
        Y_next = euler_step_Y(Y, Z[n], u, x, dBbar[:, n], mp, dt)
        if not np.all(np.isfinite(value(Y_next))):
            raise NonFiniteError(n, "Y")
        if coupled:
            Yt = euler_step_Ytilde(Yt, Zt[n], u, x, dBbar[:, n], mp, dt)
            if not np.all(np.isfinite(value(Yt))):
                raise NonFiniteError(n, "Ytilde")
        Y = Y_next
    if record:
        rec["Y"].append(value(Y) + zeros)
        u_T = regime_u(regime, 0.0, 0.0, 0.0, X[:, grid.N], mp)
        rec["u"].append(np.asarray(u_T) + zeros)
        if coupled:
            rec["Yt"].append(value(Yt) + zeros)
        rec = {k: np.stack(v, axis=1) for k, v in rec.items() if v}
    return Y, Yt, rec


def _loss(Y, Yt):
    loss = (Y * Y).mean()
    if Yt is not None:
        loss = loss + (Yt * Yt).mean()
    return loss


def backprop_loss(solver: BsdeSolver, paths: PathBatch, batch_stats: dict | None = None):
    """Batch-mean terminal squared residual and its gradient for every parameter."""
    tape = Tape()
    P = {k: tape.var(v, name=k) for k, v in solver.params.items()}
    Y, Yt, _ = rollout(solver, P, paths, "train", batch_stats)
    loss = _loss(Y, Yt)
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in P.items()}
    return float(loss.value), grads


def loss_value(solver: BsdeSolver, paths: PathBatch, params: dict | None = None) -> float:
    """Train-mode loss without a tape (used by finite-difference checks)."""
    Y, Yt, _ = rollout(solver, solver.params if params is None else params, paths, "train")
    return float(_loss(Y, Yt))


def finite_difference_check(solver: BsdeSolver, paths: PathBatch, h: float = 1e-5, floor: float = 1e-6):
    """Compare reverse-mode gradients with central differences for every scalar.

    Returns ``(worst_relative_error, n_checked)`` over entries where either
    gradient exceeds ``floor`` in magnitude.
    """
    _, grads = backprop_loss(solver, paths)
    worst, n = 0.0, 0
    for k, v in solver.params.items():
        base = np.asarray(v, dtype=float)
        flat = base.ravel()
        an = np.asarray(grads[k], dtype=float).ravel()
        for i in range(flat.size):
            trial = flat.copy()
            P = dict(solver.params)
            trial[i] = flat[i] + h
            P[k] = trial.reshape(base.shape)
            lp = loss_value(solver, paths, P)
            trial[i] = flat[i] - h
            P[k] = trial.reshape(base.shape)
            lm = loss_value(solver, paths, P)
            fd = (lp - lm) / (2 * h)
            scale = max(abs(fd), abs(an[i]))
            if scale > floor:
                worst = max(worst, abs(fd - an[i]) / scale)
                n += 1
    return worst, n


def train(regime: StrategyRegime, mp: MarketParams, fp: FactorParams, grid: TimeGrid,
          tc: TrainConfig, log_every: int = 0, log=print) -> tuple[BsdeSolver, TrainTrace]:
    solver = new_solver(regime, mp, grid, tc)
    adam = Adam(tc.adam_beta1, tc.adam_beta2, tc.adam_eps)
    trace = TrainTrace()
    fixed = None if tc.resample else make_paths(grid, fp, tc.batch, mp.rho, tc.seed, (1, 0))
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        paths = fixed or make_paths(grid, fp, tc.batch, mp.rho, tc.seed, (1, epoch))
        batch_stats = {}
        try:
            loss, grads = backprop_loss(solver, paths, batch_stats)
        except NonFiniteError:
            raise TrainingDiverged(epoch, trace)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch, trace)
        lr = lr_at(epoch, tc.epochs, tc.lr_stages, tc.stage_boundaries)
        adam.step(solver.params, grads, lr)
        update_running_stats(solver.stats, batch_stats, tc.bn_momentum)
        trace.loss.append(loss)
        trace.lr.append(lr)
        trace.wall.append(time.perf_counter() - t0)
        if log_every and (epoch % log_every == 0 or epoch == tc.epochs - 1):
            log(f"epoch {epoch:5d}  loss {loss:.3e}  lr {lr:.2e}  y0 {solver.y0:.6f}")
    trace.final = {k: float(solver.params[k]) for k in ("y0", "z0", "yt0", "zt0") if k in solver.params}
    return solver, trace


def replay_strategy(solver: BsdeSolver, paths: PathBatch, mode: str = "eval") -> dict:
    """Deterministic rollout returning per-step ``Y, Z, u, pi`` arrays.

    ``Y`` and ``u`` have ``N + 1`` columns; the terminal strategy uses the
    terminal condition ``Y = Z = Ztilde = 0``.
    """
    _, _, rec = rollout(solver, solver.params, paths, mode, record=True)
    rec["pi"] = rec["u"] / solver.mp.sigma
    return rec


class BsdePolicy:
    """Feedback strategy driven by a trained solver, stepped one grid point at a time."""

    def __init__(self, solver: BsdeSolver, mode: str = "eval", y_shift=None):
        self.solver = solver
        self.mode = mode
        # y_shift(n) is added to the reported Y only (negative controls).
        self.y_shift = y_shift

    def initial_state(self, batch: int):
        p = self.solver.params
        Y = np.full(batch, float(p["y0"]))
        Yt = np.full(batch, float(p["yt0"])) if self.solver.regime.coupled else None
        return Y, Yt

    def _z(self, n: int, x: np.ndarray):
        s = self.solver
        p = s.params
        if n == 0:
            return float(p["z0"]), (float(p["zt0"]) if s.regime.coupled else None)
        outs = {}
        for head in s.heads:
            hp = {k: v[n - 1:n] for k, v in s.net_params(head).items()}
            hs = {k: v[n - 1:n] for k, v in s.net_stats(head).items()}
            outs[head] = mlp_forward(hp, x[None, None, :], s.spec, self.mode, hs)[0]
        Z = outs["z"][0]
        if not s.regime.coupled:
            return Z, None
        return Z, (outs["z"][1] if "zt" not in outs else outs["zt"][0])

    def step(self, n: int, x: np.ndarray, state, dBbar_n: np.ndarray):
        """Return ``(u_n, next_state)``."""
        s = self.solver
        Y, Yt = state
        if n >= s.grid.N:
            return np.asarray(regime_u(s.regime, 0.0, 0.0, 0.0, x, s.mp)) + 0.0 * x, state
        Z, Zt = self._z(n, x)
        u = regime_u(s.regime, Y, Z, Zt, x, s.mp)
        Y_next = euler_step_Y(Y, Z, u, x, dBbar_n, s.mp, s.grid.dt)
        Yt_next = euler_step_Ytilde(Yt, Zt, u, x, dBbar_n, s.mp, s.grid.dt) if Yt is not None else None
        return u, (Y_next, Yt_next)

    def observed_Y(self, n: int, state, x=None):
        Y = state[0]
        return Y + (self.y_shift(n) if self.y_shift is not None else 0.0)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(solver: BsdeSolver, path) -> None:
    """JSON checkpoint: header, trainable scalars, then one block per step network."""
    scalars = {k: float(v) for k, v in solver.params.items() if "." not in k}
    nets = []
    for n in range(1, solver.grid.N):
        block = {"step": n, "params": {}, "stats": {}}
        for k, v in solver.params.items():
            if "." in k:
                block["params"][k] = v[n - 1].tolist()
        for k, v in solver.stats.items():
            block["stats"][k] = v[n - 1].tolist()
        nets.append(block)
    c = solver.regime.constraint
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {**asdict(solver.spec), "hidden_dims": list(solver.spec.hidden_dims),
                 "heads": list(solver.heads)},
        "regime": {"tag": solver.regime.tag.value, "lo": c.lo if c else None, "hi": c.hi if c else None},
        "market": asdict(solver.mp),
        "grid": asdict(solver.grid),
        "scalars": scalars,
        "nets": nets,
    }
    write_atomic(path, json.dumps(doc, indent=1))


def load_checkpoint(path) -> BsdeSolver:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    sp = dict(doc["spec"])
    heads = tuple(sp.pop("heads"))
    sp["hidden_dims"] = tuple(sp["hidden_dims"])
    spec = MlpSpec(**sp)
    rg = doc["regime"]
    cons = Constraint(rg["lo"], rg["hi"]) if rg["lo"] is not None else None
    regime = StrategyRegime(Regime(rg["tag"]), cons)
    params = {k: np.array(v) for k, v in doc["scalars"].items()}
    stats = {}
    nets = sorted(doc["nets"], key=lambda b: b["step"])
    if nets:
        for k in nets[0]["params"]:
            params[k] = np.stack([np.array(b["params"][k]) for b in nets])
        for k in nets[0]["stats"]:
            stats[k] = np.stack([np.array(b["stats"][k]) for b in nets])
    return BsdeSolver(regime, MarketParams(**doc["market"]), TimeGrid(**doc["grid"]), spec, params,
                      stats, heads)


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
