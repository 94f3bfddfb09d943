"""Flat ``key = value`` experiment configuration.

One assignment per line, dotted keys, ``#`` comments. Values are Python
literals (numbers, strings, tuples, booleans); bare words parse as strings.
Unset keys take the defaults below, so a config file only lists what
differs. ``dump_config`` writes every resolved key, and reading it back gives
an equal :class:`ExperimentConfig`.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field

from .bsde import TrainConfig
from .market import FactorParams, MarketParams, TimeGrid
from .nn import DEFAULT_LR_STAGES
from .oracle import PdeGrid
from .strategy import Constraint, Regime, StrategyRegime


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        self.key = key
        super().__init__(f"{key}: {msg}")


DEFAULTS: dict[str, object] = {
    "market.r": 0.017,
    "market.sigma": 0.15,
    "market.zeta": 1.0,
    "market.gamma": 0.1,
    "market.rho": 0.0,
    "market.trunc": 10000.0,
    "factor.lambda": 0.27,
    "factor.x_bar": 0.273,
    "factor.nu": 0.065,
    "factor.x0": 0.273,
    "grid.T": 2.0,
    "grid.N": 40,
    "regime.tag": "RhoZero",
    "regime.lo": -10000.0,
    "regime.hi": 10000.0,
    "train.epochs": 5000,
    "train.batch": 512,
    "train.lr_schedule": DEFAULT_LR_STAGES,
    "train.stage_boundaries": None,
    "train.seed": 0,
    "train.resample": True,
    "train.hidden_dims": (11, 11),
    "train.bn_eps": 1e-5,
    "train.bn_momentum": 0.9,
    "train.out_scale": 0.1,
    "train.joint_head": True,
    "train.log_every": 500,
    "eval.batch": 100000,
    "eval.n_inner": 100,
    "eval.n_paths": 1000,
    "eval.fk_paths": 10000,
    "eval.probe_times": (0.0, 0.5, 1.0, 1.5),
    "eval.etas": (-1.0, -0.5, -0.25, 0.25, 0.5, 1.0),
    "eval.eps_steps": (4, 8, 16),
    "sweep.param": "gamma",
    "sweep.values": (0.05, 0.1, 0.5),
    "compare.rhos": (-0.93, -0.62, -0.31, 0.0),
    "table1.times": (0.0, 0.5, 1.0, 1.5, 2.0),
    "ode.theta": 0.273,
    "ode.N": 40,
    "pde.M": 400,
    "pde.N_t": 1600,
    "pde.width": 8.0,
    "pde.terminal": 0.0,
    "io.out": "runs",
    "io.seed": 0,
    "io.checkpoint": None,
    "io.checkpoint2": None,
}

_FLOAT = {"market.r", "market.sigma", "market.zeta", "market.gamma", "market.rho", "market.trunc",
          "factor.lambda", "factor.x_bar", "factor.nu", "factor.x0", "grid.T", "regime.lo", "regime.hi",
          "train.bn_eps", "train.bn_momentum", "train.out_scale", "ode.theta", "pde.width", "pde.terminal"}
_INT = {"grid.N", "train.epochs", "train.batch", "train.seed", "train.log_every", "eval.batch", "eval.n_inner",
        "eval.n_paths", "eval.fk_paths", "ode.N", "pde.M", "pde.N_t", "io.seed"}
_BOOL = {"train.resample", "train.joint_head"}


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        raw[k.strip()] = parse_value(v)
    return raw


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(item, "override must look like key=value")
    k, v = item.split("=", 1)
    return k.strip(), parse_value(v)


@dataclass
class ExperimentConfig:
    market: MarketParams
    factor: FactorParams
    grid: TimeGrid
    regime: StrategyRegime
    train: TrainConfig
    values: dict = field(repr=False)

    def __getitem__(self, key):
        return self.values[key]

    def pde_grid(self) -> PdeGrid:
        v = self.values
        return PdeGrid.around(self.factor, self.grid.T, M=v["pde.M"], N_t=v["pde.N_t"], width=v["pde.width"])

    def hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


def _coerce(key, val):
    if val is None:
        return val
    if key in _BOOL:
        if not isinstance(val, bool):
            raise ConfigError(key, f"expected true/false, got {val!r}")
        return val
    if key in _INT:
        if isinstance(val, bool) or not isinstance(val, int):
            if isinstance(val, float) and val.is_integer():
                return int(val)
            raise ConfigError(key, f"expected an integer, got {val!r}")
        return val
    if key in _FLOAT:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(key, f"expected a number, got {val!r}")
        return float(val)
    return val


def _build(key, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(key, str(e)) from None


def validate_config(raw: dict) -> ExperimentConfig:
    """Fill defaults, coerce types and check every invariant.

    Errors are :class:`ConfigError` naming the offending key.
    """
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    v = dict(DEFAULTS)
    v.update(raw)
    v = {k: _coerce(k, x) for k, x in v.items()}

    if not -1.0 <= v["market.rho"] <= 1.0:
        raise ConfigError("market.rho", f"must lie in [-1, 1], got {v['market.rho']}")
    for k in ("market.r", "market.sigma", "market.zeta"):
        if not v[k] > 0:
            raise ConfigError(k, f"must be positive, got {v[k]}")
    if v["market.gamma"] < 0:
        raise ConfigError("market.gamma", "must be nonnegative")
    try:
        tag = Regime(v["regime.tag"])
    except ValueError:
        raise ConfigError("regime.tag", f"unknown regime {v['regime.tag']!r}; "
                          f"one of {', '.join(r.value for r in Regime)}") from None
    if v["market.gamma"] == 0.0 and tag is not Regime.BENCHMARK:
        raise ConfigError("market.gamma", "must be positive unless regime.tag = Benchmark")
    if tag is Regime.RHO_ZERO and v["market.rho"] != 0.0:
        raise ConfigError("regime.tag", "RhoZero needs market.rho = 0; use Approximate or Constrained")
    for k in ("factor.nu", "factor.lambda"):
        if v[k] < 0:
            raise ConfigError(k, "must be nonnegative")
    if not v["grid.T"] > 0:
        raise ConfigError("grid.T", "must be positive")
    if v["grid.N"] < 1:
        raise ConfigError("grid.N", "must be at least 1")
    if v["regime.lo"] > v["regime.hi"]:
        raise ConfigError("regime.lo", "must not exceed regime.hi")
    sched = v["train.lr_schedule"]
    try:
        sched = tuple((float(a), float(b)) for a, b in sched)
    except (TypeError, ValueError):
        raise ConfigError("train.lr_schedule", "expected a sequence of (start, end) pairs") from None
    v["train.lr_schedule"] = sched
    if v["train.stage_boundaries"] is not None:
        b = tuple(float(x) for x in v["train.stage_boundaries"])
        if len(b) != len(sched) - 1 or list(b) != sorted(b) or not all(0 < x < 1 for x in b):
            raise ConfigError("train.stage_boundaries", "need len(lr_schedule) - 1 increasing fractions in (0, 1)")
        v["train.stage_boundaries"] = b
    v["train.hidden_dims"] = tuple(int(h) for h in v["train.hidden_dims"])
    for k in ("eval.probe_times", "eval.etas", "sweep.values", "compare.rhos", "table1.times"):
        v[k] = tuple(float(x) for x in v[k])
    v["eval.eps_steps"] = tuple(int(x) for x in v["eval.eps_steps"])
    if v["eval.batch"] % v["eval.n_inner"] or v["eval.batch"] // v["eval.n_inner"] < 2:
        raise ConfigError("eval.batch", "must be a multiple of eval.n_inner with at least two groups")
    if v["sweep.param"] not in ("gamma", "zeta", "rho"):
        raise ConfigError("sweep.param", "one of gamma, zeta, rho")
    if list(v["sweep.values"]) != sorted(v["sweep.values"]):
        raise ConfigError("sweep.values", "must be sorted ascending")

    market = _build("market", MarketParams, v["market.r"], v["market.sigma"], v["market.zeta"], v["market.gamma"],
                    v["market.rho"], v["market.trunc"])
    factor = _build("factor", FactorParams, v["factor.lambda"], v["factor.x_bar"], v["factor.nu"], v["factor.x0"],
                    v["market.trunc"])
    grid = _build("grid", TimeGrid, v["grid.T"], v["grid.N"])
    constraint = _build("regime", Constraint, v["regime.lo"], v["regime.hi"]) if tag is Regime.CONSTRAINED else None
    regime = StrategyRegime(tag, constraint)
    train = _build("train", TrainConfig, epochs=v["train.epochs"], batch=v["train.batch"], lr_stages=sched,
                   stage_boundaries=v["train.stage_boundaries"], seed=v["train.seed"], resample=v["train.resample"],
                   hidden_dims=v["train.hidden_dims"], bn_eps=v["train.bn_eps"], bn_momentum=v["train.bn_momentum"],
                   out_scale=v["train.out_scale"], joint_head=v["train.joint_head"])
    return ExperimentConfig(market, factor, grid, regime, train, v)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_text(fh.read())
    for item in overrides:
        k, val = parse_override(item)
        raw[k] = val
    return validate_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {cfg.values[k]!r}\n" for k in sorted(cfg.values))
