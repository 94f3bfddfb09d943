"""Command-line entry point: ``eqbsde <subcommand> [--config F] [--set k=v ...]``.

Each run writes into ``<out>/<subcommand>_<regime>_rho.._gamma.._zeta.._seed..``:
its CSV payloads, the resolved config (``config.txt``) and ``report.json``.
All files are written to a temporary name and renamed when complete.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluator as ev
from .bsde import load_checkpoint, replay_strategy, save_checkpoint, train, write_atomic
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .market import TimeGrid, make_paths
from .oracle import feynman_kac_check, solve_complete_ode, solve_pde_f, solve_pde_g
from .strategy import Constraint, Regime, StrategyRegime

SUBCOMMANDS = ("train", "replay", "sweep", "compare-variance", "compare-rho", "table1",
               "oracle-ode", "oracle-pde", "fk-check", "gain")


class CliError(RuntimeError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _csv(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _rows_csv(path: Path, header, rows) -> None:
    def w(p):
        with open(p, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
    _csv(path, w)


def run_name(sub: str, cfg: ExperimentConfig) -> str:
    m = cfg.market
    return f"{sub}_{cfg.regime.tag.value}_rho{m.rho:g}_gamma{m.gamma:g}_zeta{m.zeta:g}_seed{cfg['io.seed']}"


def _checkpoint(cfg: ExperimentConfig, key: str = "io.checkpoint"):
    path = cfg[key]
    if path is None:
        raise CliError(f"this subcommand needs a trained solver; set {key}=<checkpoint.json>")
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path} ({key})")
    return load_checkpoint(path)


# -- subcommands ---------------------------------------------------------

def cmd_train(cfg, out):
    solver, trace = train(cfg.regime, cfg.market, cfg.factor, cfg.grid, cfg.train, cfg["train.log_every"], _log)
    save_checkpoint(solver, out / "checkpoint.json")
    _csv(out / "loss.csv", trace.to_csv)
    sm = trace.smoothed()
    return {"final_loss": trace.loss[-1], "final_smoothed_loss": float(sm[-1]), **trace.final}


def cmd_replay(cfg, out):
    s = _checkpoint(cfg)
    paths = make_paths(s.grid, cfg.factor, cfg["eval.n_paths"], s.mp.rho, cfg["io.seed"], (2,))
    rec = replay_strategy(s, paths)
    cols = (s.grid.times, paths.X[0], rec["Y"][0], rec["pi"][0],
            paths.X.mean(0), rec["Y"].mean(0), rec["pi"].mean(0))
    _rows_csv(out / "replay.csv", ("t", "X_path0", "Y_path0", "pi_path0", "mean_X", "mean_Y", "mean_pi"), zip(*cols))
    return {"y0": s.y0, "mean_pi_t0": float(rec["pi"][:, 0].mean())}


def _sweep(cfg, out, param, values, regime, fname):
    res = ev.sensitivity_sweep(param, values, regime, cfg.market, cfg.factor, cfg.grid, cfg.train,
                               cfg["eval.n_paths"], cfg["io.seed"], log_every=cfg["train.log_every"], log=_log)
    _csv(out / fname, res.to_csv)
    for v, s in zip(res.values, res.solvers):
        save_checkpoint(s, out / f"checkpoint_{param}{v:g}.json")
    avg = res.time_avg
    return {"values": list(res.values), "time_avg_pi": avg.tolist(),
            "strictly_decreasing": bool(np.all(np.diff(avg) < 0))}


def cmd_sweep(cfg, out):
    return _sweep(cfg, out, cfg["sweep.param"], cfg["sweep.values"], cfg.regime, "sweep.csv")


def cmd_compare_rho(cfg, out):
    regime = StrategyRegime(Regime.CONSTRAINED, Constraint(cfg["regime.lo"], cfg["regime.hi"]))
    return _sweep(cfg, out, "rho", cfg["compare.rhos"], regime, "compare_rho.csv")


def cmd_compare_variance(cfg, out):
    s = _checkpoint(cfg)
    vc = ev.variance_utility_comparison(s, s.mp, cfg.factor, s.grid, cfg["eval.batch"], cfg["io.seed"],
                                        cfg["eval.n_inner"])
    _csv(out / "variance.csv", vc.to_csv)
    return {"max_var_excess_in_se": float(np.max((vc.var_eq - vc.var_bench) / vc.d_var_se)),
            "max_utility_deficit": float(np.max(vc.eu_bench - vc.eu_eq))}


def cmd_table1(cfg, out):
    a = _checkpoint(cfg, "io.checkpoint")
    c = _checkpoint(cfg, "io.checkpoint2")
    paths = make_paths(a.grid, cfg.factor, cfg["eval.n_paths"], a.mp.rho, cfg["io.seed"], (2,))
    rows = ev.table1_comparison(a, c, paths, cfg["table1.times"])
    _rows_csv(out / "table1.csv", ev.Table1Row.COLUMNS, [r.as_tuple() for r in rows])
    return {"max_rel_err_permille": max(r.rel_err_permille for r in rows)}


def cmd_oracle_ode(cfg, out):
    sol = solve_complete_ode(cfg.market, cfg["ode.theta"], TimeGrid(cfg.grid.T, cfg["ode.N"]))
    _csv(out / "ode.csv", sol.to_csv)
    return {"A0": float(sol.A[0]), "pi_hat0": float(sol.pi_hat[0])}


def cmd_oracle_pde(cfg, out):
    pg = cfg.pde_grid()
    f = solve_pde_f(cfg.market, cfg.factor, pg, terminal=cfg["pde.terminal"])
    sol = solve_pde_g(cfg.market, cfg.factor, pg, f)
    _csv(out / "pde.csv", sol.to_csv)
    x0 = cfg.factor.x0
    return {"f0_at_x0": float(np.interp(x0, sol.x, sol.f[0])), "g0_at_x0": float(np.interp(x0, sol.x, sol.g[0]))}


def cmd_fk_check(cfg, out):
    s = _checkpoint(cfg)
    pg = cfg.pde_grid()
    if pg.N_t % s.grid.N:
        raise CliError(f"pde.N_t={pg.N_t} must be a multiple of the solver's N={s.grid.N}")
    pde = solve_pde_f(s.mp, cfg.factor, pg, terminal=cfg["pde.terminal"])
    paths = make_paths(s.grid, cfg.factor, cfg["eval.fk_paths"], s.mp.rho, cfg["io.seed"], (5,))
    rep = feynman_kac_check(s, pde, paths, s.mp, s.grid)
    _csv(out / "fk.csv", rep.to_csv)
    return {"max_rms_Y": float(np.max(rep.rms_Y)), "max_rms_Z": float(np.nanmax(rep.rms_Z)),
            "excluded_fraction": rep.excluded}


def cmd_gain(cfg, out):
    s = _checkpoint(cfg)
    rows = []
    for k in cfg["eval.eps_steps"]:
        gains = ev.gain_grid(s, s.mp, cfg.factor, s.grid, cfg["eval.probe_times"], cfg["eval.etas"],
                             k * s.grid.dt, cfg["eval.batch"], cfg["io.seed"], cfg["eval.n_inner"])
        rows += [(g.t, g.eta, g.eps, g.rho, g.gain, g.stderr) for g in gains]
    _rows_csv(out / "gain.csv", ("t", "eta", "eps", "rho", "gain", "stderr"), rows)
    return {"max_gain_in_se": float(max(r[4] / r[5] for r in rows))}


COMMANDS = {
    "train": cmd_train, "replay": cmd_replay, "sweep": cmd_sweep, "compare-variance": cmd_compare_variance,
    "compare-rho": cmd_compare_rho, "table1": cmd_table1, "oracle-ode": cmd_oracle_ode,
    "oracle-pde": cmd_oracle_pde, "fk-check": cmd_fk_check, "gain": cmd_gain,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqbsde", description="Equilibrium mean-variance/CARA BSDE experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="sets io.seed and train.seed")
    p.add_argument("--out", help="output root (io.out)")
    return p


def run(sub: str, cfg: ExperimentConfig) -> tuple[Path, dict]:
    out = Path(cfg["io.out"]) / run_name(sub, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.txt", dump_config(cfg))
    t0 = time.perf_counter()
    metrics = COMMANDS[sub](cfg, out)
    report = {
        "subcommand": sub,
        "config_hash": cfg.hash(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_clock_s": time.perf_counter() - t0,
        "artifacts": sorted(p.name for p in out.iterdir() if p.name != "report.json"),
        "metrics": metrics,
    }
    write_atomic(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out, report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"io.seed={args.seed}", f"train.seed={args.seed}"]
    if args.out is not None:
        overrides.append(f"io.out={args.out!r}")
    try:
        cfg = load_config(args.config, overrides)
        out, report = run(args.subcommand, cfg)
    except (ConfigError, CliError) as e:
        print(f"eqbsde {args.subcommand}: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"out": str(out), **report["metrics"]}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
