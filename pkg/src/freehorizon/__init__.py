"""Infinite-horizon optimal control through free-final-time problems.

Fixed-horizon problems are solved with iLQR over a sweep of horizons; the
first horizon whose terminal state enters a sublevel set of the terminal
cost gives the free-final-time solution and its cost-to-go.
"""

__version__ = "0.1.0"

from .cost import CostSpec, stage_cost, terminal_cost, trajectory_cost
from .dynamics import Model, linearize, rollout, step
from .horizon import (
    ACResult,
    DiscountedResult,
    SweepRecord,
    first_hitting_time,
    m_sweep,
    solve_acocp,
    solve_discounted_acocp,
    sweep_horizons,
)
from .ilqr import Problem, SolveResult, SolverOptions, solve_fhocp

__all__ = [
    "ACResult",
    "CostSpec",
    "DiscountedResult",
    "Model",
    "Problem",
    "SolveResult",
    "SolverOptions",
    "SweepRecord",
    "first_hitting_time",
    "linearize",
    "m_sweep",
    "rollout",
    "solve_acocp",
    "solve_discounted_acocp",
    "solve_fhocp",
    "stage_cost",
    "step",
    "sweep_horizons",
    "terminal_cost",
    "trajectory_cost",
]
