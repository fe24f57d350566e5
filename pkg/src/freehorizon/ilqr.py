"""Fixed-horizon iLQR.

Solves ``min_u sum_k beta**k c(x_k, u_k) + beta**T phi(x_T)`` subject to the
RK4 dynamics from a given initial state. Each iteration linearizes the
dynamics along the nominal trajectory, runs the Riccati-like backward
recursion with Levenberg-Marquardt damping on ``Q_uu``, then a backtracking
forward rollout with the closed-loop update
``u_k = u_hat_k + alpha * k_k + K_k (x_k - x_hat_k)``.

Damping starts at zero and is only switched on (at ``reg_init``) when
``Q_uu`` is not positive definite or the line search fails, so that a
linear-quadratic problem is solved in a single Newton step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from . import cost as costs
from .cost import CostBreakdown, CostSpec, TrajectoryExpansion
from .dynamics import DimensionError, Model, _rk4, linearize, rollout

Array = npt.NDArray[np.float64]

log = logging.getLogger(__name__)

ARMIJO = 1e-4


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 200
    cost_tolerance: float = 1e-7
    reg_init: float = 1.0
    reg_min: float = 1e-8
    reg_max: float = 1e8
    reg_scale: float = 2.0
    alphas: tuple[float, ...] = tuple(2.0**-i for i in range(11))
    # "normalized": discount applied inside the value recursion (default).
    # "prescaled": expansions carry beta**k and the recursion is undiscounted.
    discount_mode: str = "normalized"

    def __post_init__(self) -> None:
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.cost_tolerance > 0:
            raise ValueError("cost_tolerance must be positive")
        if not 0 < self.reg_min <= self.reg_init <= self.reg_max:
            raise ValueError("need 0 < reg_min <= reg_init <= reg_max")
        if not self.reg_scale > 1:
            raise ValueError("reg_scale must exceed 1")
        a = np.asarray(self.alphas)
        if a.size == 0 or a[0] > 1 or a[-1] <= 0 or np.any(np.diff(a) >= 0):
            raise ValueError("alphas must be strictly decreasing within (0, 1]")
        if self.discount_mode not in ("normalized", "prescaled"):
            raise ValueError(f"unknown discount_mode {self.discount_mode!r}")


@dataclass(frozen=True, eq=False)
class Problem:
    """A model, a cost and an initial state."""

    model: Model
    cost: CostSpec
    x0: Array

    def __post_init__(self) -> None:
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size != self.model.n or self.cost.n != self.model.n or self.cost.p != self.model.p:
            raise DimensionError(
                f"{self.model.name} is ({self.model.n}, {self.model.p}); got x0 of size {x0.size} "
                f"and cost of dimensions ({self.cost.n}, {self.cost.p})"
            )
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    def with_x0(self, x0) -> "Problem":
        return Problem(self.model, self.cost, x0)

    def with_cost(self, cost: CostSpec) -> "Problem":
        return Problem(self.model, cost, self.x0)


@dataclass(frozen=True)
class Gains:
    k: Array  # (T, p) feedforward
    K: Array  # (T, p, n) feedback
    d1: float  # expected change, linear-in-alpha term
    d2: float  # expected change, quadratic-in-alpha term

    def expected_decrease(self, alpha: float = 1.0) -> float:
        return -(alpha * self.d1 + alpha**2 * self.d2)


@dataclass(frozen=True, eq=False)
class SolveResult:
    states: Array
    controls: Array
    breakdown: CostBreakdown
    converged: bool
    iterations: int
    feedback_gains: Array
    cost_history: tuple[float, ...] = field(default=())

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @property
    def total_cost(self) -> float:
        return self.breakdown.total


class SolverDivergedError(RuntimeError):
    """Regularization hit ``reg_max`` without an acceptable step.

    The last accepted iterate is kept on the exception for post-mortem.
    """

    def __init__(self, message: str, states: Array, controls: Array, cost: float):
        super().__init__(message)
        self.states = states
        self.controls = controls
        self.cost = cost


def backward_pass(A: Array, B: Array, expansion: TrajectoryExpansion, regularization: float, discount: float = 1.0) -> Gains | None:
    """Value recursion from the terminal expansion back to step 0.

    ``A`` is ``(T, n, n)`` and ``B`` is ``(T, n, p)``. With ``discount`` set,
    the expansion blocks are taken as unweighted and the successor value is
    multiplied by the discount at every step. Returns ``None`` if
    ``Q_uu + regularization * I`` is not positive definite at some step.
    """
    T, n, p = B.shape
    if T < 1:
        raise ValueError("backward pass needs T >= 1")
    k_ff = np.empty((T, p))
    K_fb = np.empty((T, p, n))
    Vx = expansion.lx[T].copy()
    Vxx = expansion.lxx[T].copy()
    d1 = d2 = 0.0
    eye = np.eye(p)
    for t in range(T - 1, -1, -1):
        At, Bt = A[t], B[t]
        Vx = discount * Vx
        Vxx = discount * Vxx
        VxxA = Vxx @ At
        Qx = expansion.lx[t] + At.T @ Vx
        Qu = expansion.lu[t] + Bt.T @ Vx
        Qxx = expansion.lxx[t] + At.T @ VxxA
        Quu = expansion.luu[t] + Bt.T @ Vxx @ Bt
        Qux = expansion.lux[t] + Bt.T @ VxxA
        try:
            L = np.linalg.cholesky(Quu + regularization * eye)
        except np.linalg.LinAlgError:
            return None
        rhs = np.column_stack([Qu, Qux])
        sol = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        kt = -sol[:, 0]
        Kt = -sol[:, 1:]
        k_ff[t] = kt
        K_fb[t] = Kt
        d1 = kt @ Qu + discount * d1
        d2 = 0.5 * kt @ Quu @ kt + discount * d2
        Vx = Qx + Kt.T @ Quu @ kt + Kt.T @ Qu + Qux.T @ kt
        Vxx = Qxx + Kt.T @ Quu @ Kt + Kt.T @ Qux + Qux.T @ Kt
        Vxx = 0.5 * (Vxx + Vxx.T)
    return Gains(k=k_ff, K=K_fb, d1=float(d1), d2=float(d2))


def _closed_loop_rollout(model: Model, x0: Array, states: Array, controls: Array, gains: Gains, alpha: float) -> tuple[Array, Array]:
    T = controls.shape[0]
    xs = np.empty_like(states)
    us = np.empty_like(controls)
    xs[0] = x0
    dt = model.dt
    with np.errstate(all="ignore"):
        for t in range(T):
            us[t] = controls[t] + alpha * gains.k[t] + gains.K[t] @ (xs[t] - states[t])
            xs[t + 1] = _rk4(model, xs[t], us[t], dt)
    return xs, us


def forward_pass(problem: Problem, states: Array, controls: Array, gains: Gains, alphas, old_cost: float):
    """Backtracking line search over ``alphas``.

    Returns ``(states, controls, breakdown, alpha)`` for the first step whose
    actual decrease is at least ``1e-4`` of the predicted one, or ``None``
    when no step is accepted.
    """
    for alpha in alphas:
        expected = gains.expected_decrease(alpha)
        xs, us = _closed_loop_rollout(problem.model, problem.x0, states, controls, gains, alpha)
        if not np.all(np.isfinite(xs)):
            continue
        bd = costs.trajectory_cost(problem.cost, xs, us)
        actual = old_cost - bd.total
        if actual > 0 and actual >= ARMIJO * expected:
            return xs, us, bd, alpha
    return None


def solve_fhocp(problem: Problem, T: int, init_controls=None, options: SolverOptions | None = None) -> SolveResult:
    """Solve the horizon-``T`` problem with terminal cost ``phi``.

    ``breakdown.terminal`` is the (discounted) raw ``phi(x_T)``; any
    ``max(phi, M)`` is applied by the caller.
    """
    opts = options or SolverOptions()
    model, spec = problem.model, problem.cost
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    if init_controls is None:
        controls = np.zeros((T, model.p))
    else:
        controls = np.array(init_controls, dtype=float).reshape(-1, model.p)
        if controls.shape[0] != T:
            raise DimensionError(f"init_controls has length {controls.shape[0]}, expected {T}")
    states = rollout(model, problem.x0, controls)
    bd = costs.trajectory_cost(spec, states, controls)
    history = [bd.total]

    if opts.discount_mode == "normalized":
        discounted, discount = False, spec.beta
    else:
        discounted, discount = True, 1.0

    lam = 0.0
    converged = False
    K_fb = np.zeros((T, model.p, model.n))
    iterations = 0
    while iterations < opts.max_iterations:
        iterations += 1
        lin = linearize(model, states[:-1], controls)
        expansion = costs.quadratize_trajectory(spec, states, controls, discounted=discounted)
        accepted = None
        while accepted is None:
            gains = backward_pass(lin.A, lin.B, expansion, lam, discount)
            if gains is not None:
                if gains.expected_decrease() <= opts.cost_tolerance * abs(bd.total):
                    K_fb = gains.K
                    converged = True
                    break
                accepted = forward_pass(problem, states, controls, gains, opts.alphas, bd.total)
                if accepted is not None:
                    break
            lam = max(opts.reg_init, lam * opts.reg_scale)
            if lam > opts.reg_max:
                raise SolverDivergedError(
                    f"regularization exceeded {opts.reg_max:g} at iteration {iterations} (T={T})",
                    states,
                    controls,
                    bd.total,
                )
        if converged:
            break
        old = bd.total
        states, controls, bd, _alpha = accepted
        K_fb = gains.K
        history.append(bd.total)
        lam = lam / opts.reg_scale
        if lam < opts.reg_min:
            lam = 0.0
        if (old - bd.total) <= opts.cost_tolerance * abs(old):
            converged = True
            break

    if not converged:
        log.debug("iLQR hit max_iterations=%d at T=%d (cost %.6g)", opts.max_iterations, T, bd.total)
    return SolveResult(
        states=states,
        controls=controls,
        breakdown=bd,
        converged=converged,
        iterations=iterations,
        feedback_gains=K_fb,
        cost_history=tuple(history),
    )
