"""Connecting short-term expansions for Markovian quadratic-growth and Lipschitz BSDEs."""

from .grid import GridFunction, SpatialGrid, TimeGrid, build_grid_sequence, build_time_grid, taylor_eval
from .model import (
    Driver,
    ForwardModel,
    TerminalFunction,
    TruncationRule,
    preset_qg_2d,
    preset_terminal,
    preset_two_rate,
    truncate_driver,
)
from .solver import SolveReport, SolverConfig, backward_sweep, stability_check

__version__ = "0.1.0"

__all__ = [
    "Driver",
    "ForwardModel",
    "GridFunction",
    "SolveReport",
    "SolverConfig",
    "SpatialGrid",
    "TerminalFunction",
    "TimeGrid",
    "TruncationRule",
    "backward_sweep",
    "build_grid_sequence",
    "build_time_grid",
    "preset_qg_2d",
    "preset_terminal",
    "preset_two_rate",
    "stability_check",
    "taylor_eval",
    "truncate_driver",
]
