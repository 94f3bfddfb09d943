"""Deep-BSDE engine for time-consistent CARA mean-variance portfolio equilibria
in a one-factor market, with ODE/PDE reference solvers and Monte-Carlo
evaluation of the equilibrium gain functional."""

from .market import FactorParams, MarketParams, PathBatch, TimeGrid, make_paths, split_paths
from .strategy import Constraint, Regime, StrategyRegime
from .bsde import BsdeSolver, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "BsdeSolver", "Constraint", "FactorParams", "MarketParams", "PathBatch", "Regime", "StrategyRegime",
    "TimeGrid", "TrainConfig", "load_checkpoint", "make_paths", "save_checkpoint", "split_paths", "train",
]
