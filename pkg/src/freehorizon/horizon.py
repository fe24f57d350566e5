"""Free-final-time solutions by sweeping the horizon.

The free-final-time problem

    J_M(x) = min_{u, T}  sum_{k<T} beta**k c(x_k, u_k) + beta**T max(phi(x_T), M)
             s.t.  phi(x_T) <= M

is never solved directly. Instead the fixed-horizon problem (terminal cost
``phi``) is solved for a range of horizons ``T``; the optimal free final time
is the first swept horizon whose terminal state lands in the sublevel set
``{phi <= M}``, and ``J_M`` is the transfer cost there plus ``beta**T * M``.

Horizons live on the integer step grid, so the hitting time is only known to
grid resolution. A coarse linear scan is refined with unit steps just below
the first coarse hit.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from . import cost as costs
from .ilqr import Problem, SolveResult, SolverDivergedError, SolverOptions, solve_fhocp

Array = npt.NDArray[np.float64]

log = logging.getLogger(__name__)

THREADS_ENV = "FREEHORIZON_THREADS"


@dataclass(frozen=True)
class SweepRecord:
    T: int
    total_cost: float
    transfer_cost: float
    terminal_phi: float
    hit: bool
    converged: bool
    iterations: int


@dataclass(frozen=True, eq=False)
class ACResult:
    T_star: int
    J_M: float
    M: float
    solution: SolveResult
    sweep: list[SweepRecord]

    @property
    def phi_at_hit(self) -> float:
        return self.sweep_record(self.T_star).terminal_phi

    def sweep_record(self, T: int) -> SweepRecord:
        for rec in self.sweep:
            if rec.T == T:
                return rec
        raise KeyError(T)


@dataclass(frozen=True, eq=False)
class DiscountedResult:
    entered: bool
    T_star: int | None
    J_M: float | None
    budget_T: int
    beta: float
    sweep: list[SweepRecord] = field(default_factory=list)
    solution: SolveResult | None = None


@dataclass(frozen=True)
class MSweepEntry:
    M: float
    T_star: int
    J_M: float
    gap: float


@dataclass(frozen=True, eq=False)
class MSweepResult:
    entries: list[MSweepEntry]
    J_ref: float
    T_ref: int
    reference: SolveResult
    results: list[ACResult]


class SweepFailedError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[int, str]):
        super().__init__(message)
        self.diagnostics = diagnostics


class HittingTimeNotFoundError(RuntimeError):
    """No swept horizon reached the terminal set; enlarge ``t_max``."""

    def __init__(self, message: str, sweep: list[SweepRecord]):
        super().__init__(message)
        self.sweep = sweep


def _record(problem: Problem, T: int, res: SolveResult, M: float) -> SweepRecord:
    phi = costs.terminal_cost(problem.cost, res.states[-1])
    return SweepRecord(
        T=T,
        total_cost=res.breakdown.total,
        transfer_cost=res.breakdown.transfer,
        terminal_phi=phi,
        hit=bool(phi <= M),
        converged=res.converged,
        iterations=res.iterations,
    )


def _extend(controls: Array, T: int) -> Array:
    """Truncate or zero-extend a control sequence to length ``T``."""
    if controls.shape[0] >= T:
        return controls[:T].copy()
    return np.vstack([controls, np.zeros((T - controls.shape[0], controls.shape[1]))])


def _diverged_result(problem: Problem, T: int, states: Array, controls: Array) -> SolveResult:
    return SolveResult(
        states=states,
        controls=controls,
        breakdown=costs.trajectory_cost(problem.cost, states, controls),
        converged=False,
        iterations=0,
        feedback_gains=np.zeros((T, problem.model.p, problem.model.n)),
    )


def _already_inside(problem: Problem, M: float) -> tuple[SweepRecord, SolveResult] | None:
    """The ``T = 0`` solution when ``x0`` already lies in the terminal set."""
    phi = costs.terminal_cost(problem.cost, problem.x0)
    if phi > M:
        return None
    states = problem.x0[None, :].copy()
    controls = np.zeros((0, problem.model.p))
    sol = SolveResult(
        states=states,
        controls=controls,
        breakdown=costs.trajectory_cost(problem.cost, states, controls),
        converged=True,
        iterations=0,
        feedback_gains=np.zeros((0, problem.model.p, problem.model.n)),
    )
    rec = SweepRecord(T=0, total_cost=phi, transfer_cost=0.0, terminal_phi=phi, hit=True, converged=True, iterations=0)
    return rec, sol


def _inside_result(problem: Problem, M: float) -> ACResult | None:
    inside = _already_inside(problem, M)
    if inside is None:
        return None
    rec, sol = inside
    return ACResult(T_star=0, J_M=M, M=M, solution=sol, sweep=[rec])


def _solve_cold(args):
    problem, T, options = args
    try:
        return solve_fhocp(problem, T, None, options), None
    except SolverDivergedError as err:
        return _diverged_result(problem, T, err.states, err.controls), str(err)


def max_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    cap = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cap))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return cap


class HorizonSweeper:
    """Solves the fixed-horizon problem over many horizons and keeps the results.

    Each new horizon is warm-started from the nearest smaller solved horizon
    (controls zero-extended), so the order of calls matters; the same call
    sequence always gives the same results.
    """

    def __init__(self, problem: Problem, options: SolverOptions | None = None, warm_start: bool = True):
        self.problem = problem
        self.options = options or SolverOptions()
        self.warm_start = warm_start
        self.solutions: dict[int, SolveResult] = {}
        self.failures: dict[int, str] = {}

    def solve(self, T: int) -> SolveResult:
        if T in self.solutions:
            return self.solutions[T]
        init = None
        if self.warm_start:
            smaller = [t for t in self.solutions if t < T and t not in self.failures]
            if smaller:
                init = _extend(self.solutions[max(smaller)].controls, T)
        try:
            res = solve_fhocp(self.problem, T, init, self.options)
        except SolverDivergedError as err:
            self.failures[T] = str(err)
            res = _diverged_result(self.problem, T, err.states, err.controls)
        self.solutions[T] = res
        return res

    def solve_many(self, horizons, parallel: bool = False) -> None:
        horizons = [T for T in horizons if T not in self.solutions]
        if not parallel or len(horizons) < 2:
            for T in horizons:
                self.solve(T)
            return
        jobs = [(self.problem, T, self.options) for T in horizons]
        with ProcessPoolExecutor(max_workers=max_workers()) as pool:
            for T, (res, failure) in zip(horizons, pool.map(_solve_cold, jobs)):
                if failure is not None:
                    self.failures[T] = failure
                self.solutions[T] = res

    def records(self, M: float, horizons=None) -> list[SweepRecord]:
        Ts = sorted(self.solutions if horizons is None else set(horizons))
        return [_record(self.problem, T, self.solutions[T], M) for T in Ts]

    def refine(self, M: float, T_hit: int, T_prev: int | None) -> None:
        """Solve every horizon strictly between the last coarse miss and the first coarse hit."""
        if T_prev is None:
            return
        for T in range(T_prev + 1, T_hit):
            self.solve(T)


def _coarse_grid(t_min: int, t_max: int, t_step: int) -> list[int]:
    if not 1 <= t_min <= t_max:
        raise ValueError(f"need 1 <= t_min <= t_max, got {t_min}, {t_max}")
    if t_step < 1:
        raise ValueError(f"t_step must be >= 1, got {t_step}")
    return list(range(t_min, t_max + 1, t_step))


def first_hitting_time(sweep: list[SweepRecord], M: float | None = None) -> int | None:
    """Smallest swept ``T`` whose solution converged inside the terminal set.

    When ``M`` is given the hit flag is recomputed from ``terminal_phi``.
    Returns ``None`` when no record qualifies.
    """
    for rec in sorted(sweep, key=lambda r: r.T):
        hit = rec.hit if M is None else rec.terminal_phi <= M
        if hit and rec.converged:
            return rec.T
    return None


def _scan(sweeper: HorizonSweeper, M: float, grid: list[int], refine: bool, parallel: bool, stop_at_hit: bool) -> None:
    if parallel:
        sweeper.solve_many(grid, parallel=True)
    prev = None
    for T in grid:
        rec = _record(sweeper.problem, T, sweeper.solve(T), M)
        if rec.hit and rec.converged:
            if refine:
                sweeper.refine(M, T, prev)
            if stop_at_hit:
                return
            break
        prev = T
    rest = [T for T in grid if T not in sweeper.solutions]
    sweeper.solve_many(rest, parallel=False)


def _check_failures(sweeper: HorizonSweeper) -> None:
    if sweeper.solutions and len(sweeper.failures) == len(sweeper.solutions):
        raise SweepFailedError("every horizon in the sweep diverged", dict(sweeper.failures))


def sweep_horizons(
    problem: Problem,
    M: float,
    t_min: int,
    t_max: int,
    t_step: int = 1,
    options: SolverOptions | None = None,
    refine: bool = True,
    parallel: bool = False,
) -> list[SweepRecord]:
    """One record per swept horizon, in increasing ``T``.

    With ``parallel`` the coarse grid is solved cold in worker processes
    (capped by ``FREEHORIZON_THREADS``); otherwise horizons are solved in
    order with warm starts.
    """
    sweeper = HorizonSweeper(problem, options, warm_start=not parallel)
    _scan(sweeper, M, _coarse_grid(t_min, t_max, t_step), refine, parallel, stop_at_hit=False)
    _check_failures(sweeper)
    return sweeper.records(M)


def _ac_result(sweeper: HorizonSweeper, M: float, horizons=None) -> ACResult:
    records = sweeper.records(M, horizons)
    T_star = first_hitting_time(records)
    if T_star is None:
        raise HittingTimeNotFoundError(
            f"no horizon up to T={max(r.T for r in records)} reached phi <= {M}; increase t_max",
            records,
        )
    sol = sweeper.solutions[T_star]
    J_M = sol.breakdown.transfer + sweeper.problem.cost.beta**T_star * M
    return ACResult(T_star=T_star, J_M=J_M, M=M, solution=sol, sweep=records)


def solve_acocp(
    problem: Problem,
    M: float,
    t_min: int = 1,
    t_max: int = 1000,
    t_step: int = 1,
    options: SolverOptions | None = None,
    refine: bool = True,
    parallel: bool = False,
    stop_at_hit: bool = False,
) -> ACResult:
    """Free-final-time solution at the first hitting time of ``{phi <= M}``.

    The whole grid up to ``t_max`` is swept (for plotting the cost against
    ``T``) unless ``stop_at_hit`` is set. A start already inside the set is
    answered without sweeping: ``T* = 0`` and ``J_M = M``, with a single
    ``T = 0`` record.
    """
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    inside = _inside_result(problem, M)
    if inside is not None:
        return inside
    sweeper = HorizonSweeper(problem, options, warm_start=not parallel)
    _scan(sweeper, M, _coarse_grid(t_min, t_max, t_step), refine, parallel, stop_at_hit=stop_at_hit)
    _check_failures(sweeper)
    return _ac_result(sweeper, M)


def reference_cost(problem: Problem, T_ref: int = 1000, options: SolverOptions | None = None) -> SolveResult:
    """Long-horizon solve without terminal cost, used as the infinite-horizon proxy."""
    return solve_fhocp(problem.with_cost(problem.cost.without_terminal()), T_ref, None, options)


def m_sweep(
    problem: Problem,
    M_values,
    t_min: int = 1,
    t_max: int = 1000,
    t_step: int = 1,
    options: SolverOptions | None = None,
    refine: bool = True,
    T_ref: int = 1000,
    reference: SolveResult | None = None,
) -> MSweepResult:
    """``J_M`` for a decreasing list of levels and its gap to a reference cost.

    All levels share one set of fixed-horizon solutions (they do not depend
    on ``M``); only the hit flags and the local refinement differ.
    """
    M_values = [float(m) for m in M_values]
    if not M_values or any(m <= 0 for m in M_values):
        raise ValueError("M values must be positive")
    if any(b >= a for a, b in zip(M_values, M_values[1:])):
        raise ValueError("M values must be strictly decreasing")
    if reference is None:
        reference = reference_cost(problem, T_ref, options)
    J_ref = reference.breakdown.total

    sweeper = HorizonSweeper(problem, options)
    grid = _coarse_grid(t_min, t_max, t_step)
    entries, results = [], []
    for M in M_values:
        res = _inside_result(problem, M)
        if res is None:
            _scan(sweeper, M, grid, refine, parallel=False, stop_at_hit=True)
            res = _ac_result(sweeper, M, horizons=[T for T in sweeper.solutions if T <= t_max])
        results.append(res)
        entries.append(MSweepEntry(M=M, T_star=res.T_star, J_M=res.J_M, gap=abs(res.J_M - J_ref)))
    _check_failures(sweeper)
    return MSweepResult(entries=entries, J_ref=J_ref, T_ref=T_ref, reference=reference, results=results)


def solve_discounted_acocp(
    problem: Problem,
    M: float,
    budget_T: int = 1500,
    t_min: int = 1,
    t_step: int = 1,
    options: SolverOptions | None = None,
    refine: bool = True,
) -> DiscountedResult:
    """Discounted free-final-time solve within a horizon budget.

    Failing to enter the terminal set within ``budget_T`` is a legitimate
    outcome for a discounted problem and is reported with ``entered=False``.
    """
    beta = problem.cost.beta
    if not 0 < beta < 1:
        raise ValueError(f"discounted solve needs beta in (0, 1), got {beta}")
    if not M > 0:
        raise ValueError(f"M must be positive, got {M}")
    inside = _already_inside(problem, M)
    if inside is not None:
        rec, sol = inside
        return DiscountedResult(entered=True, T_star=0, J_M=M, budget_T=budget_T, beta=beta, sweep=[rec], solution=sol)
    sweeper = HorizonSweeper(problem, options)
    _scan(sweeper, M, _coarse_grid(t_min, budget_T, t_step), refine, parallel=False, stop_at_hit=True)
    _check_failures(sweeper)
    records = sweeper.records(M)
    T_star = first_hitting_time(records)
    if T_star is None:
        return DiscountedResult(entered=False, T_star=None, J_M=None, budget_T=budget_T, beta=beta, sweep=records)
    sol = sweeper.solutions[T_star]
    return DiscountedResult(
        entered=True,
        T_star=T_star,
        J_M=sol.breakdown.transfer + beta**T_star * M,
        budget_T=budget_T,
        beta=beta,
        sweep=records,
        solution=sol,
    )


@dataclass(frozen=True, eq=False)
class CostToGo:
    """Re-solved free-final-time cost from one state."""

    J_M: float
    T: int
    solution: SolveResult | None


def cost_to_go(problem: Problem, M: float, guess_controls=None, options: SolverOptions | None = None, t_limit: int | None = None) -> CostToGo:
    """Free-final-time cost from ``problem.x0`` by a local first-hit search.

    The search starts at the horizon of ``guess_controls`` (typically the tail
    of a longer solution), walks down while the terminal state still lands in
    the set and up until it does. A state already inside the set has
    ``T = 0`` and cost ``M``.
    """
    spec = problem.cost
    if costs.terminal_cost(spec, problem.x0) <= M:
        return CostToGo(J_M=M, T=0, solution=None)
    p = problem.model.p
    guess = np.zeros((1, p)) if guess_controls is None else np.asarray(guess_controls, dtype=float).reshape(-1, p)
    if guess.shape[0] == 0:
        guess = np.zeros((1, p))
    t_limit = t_limit or max(4 * guess.shape[0], guess.shape[0] + 200)

    def solve(T, init):
        res = solve_fhocp(problem, T, _extend(init, T), options)
        ok = res.converged and costs.terminal_cost(spec, res.states[-1]) <= M
        return res, ok

    T = guess.shape[0]
    best, ok = solve(T, guess)
    if ok:
        while T > 1:
            res, ok_down = solve(T - 1, best.controls)
            if not ok_down:
                break
            best, T = res, T - 1
    else:
        while not ok:
            if T >= t_limit:
                raise HittingTimeNotFoundError(f"cost-to-go search exceeded T={t_limit}", [])
            T += 1
            best, ok = solve(T, best.controls)
    return CostToGo(J_M=best.breakdown.transfer + spec.beta**T * M, T=T, solution=best)
