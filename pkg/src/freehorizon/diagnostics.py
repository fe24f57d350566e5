"""Independent oracles and structural checks.

* :func:`dare_fixed_point` iterates the discrete Riccati map, giving the
  stationary LQR cost-to-go used as an exact terminal cost on linear models.
* :func:`check_jacobians` compares the solver's central-difference Jacobians
  with a separate forward-difference computation.
* :func:`check_bellman_consistency` and :func:`check_lyapunov_decrease`
  re-solve the free-final-time problem from states along a solution and test
  ``J(x_k) = c(x_k, u_k) + beta * J(x_{k+1})`` and the resulting decrease.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import numpy.typing as npt

from . import cost as costs
from .dynamics import Model, _rk4, linearize
from .horizon import ACResult, HittingTimeNotFoundError, cost_to_go
from .ilqr import Problem, SolverDivergedError, SolverOptions

Array = npt.NDArray[np.float64]


class OracleFailedError(RuntimeError):
    pass


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst_violation: float
    tolerance: float
    details: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)


def _report(name: str, violations: list[float], tol: float, details: list[dict]) -> CheckReport:
    worst = float(max(violations)) if violations else 0.0
    return CheckReport(name=name, passed=bool(worst <= tol), worst_violation=worst, tolerance=tol, details=details)


def riccati_step(P: Array, A: Array, B: Array, Q: Array, R: Array) -> Array:
    BtP = B.T @ P
    return Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)


def dare_fixed_point(A, B, Q, R, P0=None, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[Array, Array]:
    """Stationary solution of the discrete Riccati equation by fixed-point iteration.

    Starts from ``P0`` (default ``Q``) and stops when successive iterates
    agree to ``tol`` in the max norm. Returns ``(P, K)`` with the optimal
    feedback ``u = -K x``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    P = Q.copy() if P0 is None else np.array(P0, dtype=float)
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = riccati_step(P, A, B, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise OracleFailedError("Riccati iteration diverged (is (A, B) stabilizable?)")
        if np.max(np.abs(P_next - P)) <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise OracleFailedError(f"Riccati iteration did not converge in {max_iter} iterations")
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def goal_linearization(model: Model, goal) -> tuple[Array, Array]:
    """Discrete Jacobians at the goal with zero control."""
    lin = linearize(model, goal, np.zeros(model.p))
    return lin.A, lin.B


def forward_difference_jacobians(model: Model, x, u, rel_step: float = 1e-5) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.size
    z = np.concatenate([x, u])
    f0 = _rk4(model, x, u, model.dt)
    jac = np.empty((n, z.size))
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        zp = z.copy()
        zp[i] += h
        jac[:, i] = (_rk4(model, zp[:n], zp[n:], model.dt) - f0) / h
    return jac[:, :n], jac[:, n:]


def _sample_point(model: Model, rng: np.random.Generator) -> tuple[Array, Array]:
    if model.name == "car_like":
        x = rng.uniform([-5, -5, -np.pi, -3], [5, 5, np.pi, 3])
        u = rng.uniform([-3, -1.0], [3, 1.0])
    elif model.name == "unicycle":
        x = rng.uniform([-5, -5, -np.pi], [5, 5, np.pi])
        u = rng.uniform([-3, -3], [3, 3])
    else:
        x = rng.uniform(-5, 5, size=2)
        u = rng.uniform(-3, 3, size=1)
    return x, u


def check_jacobians(model: Model, n_samples: int = 100, seed: int = 0, tol: float = 1e-4) -> CheckReport:
    """Central-difference Jacobians against forward differences at random points.

    The violation at a point is the largest entrywise difference relative to
    ``max(1, |entry|)``.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    violations, details = [], []
    for i in range(n_samples):
        x, u = _sample_point(model, rng)
        lin = linearize(model, x, u)
        A_fd, B_fd = forward_difference_jacobians(model, x, u)
        err = max(
            float(np.max(np.abs(lin.A - A_fd) / np.maximum(1.0, np.abs(A_fd)))),
            float(np.max(np.abs(lin.B - B_fd) / np.maximum(1.0, np.abs(B_fd)))),
        )
        violations.append(err)
        details.append({"sample": i, "violation": err})
    return _report(f"jacobians[{model.name}]", violations, tol, details)


def recompute_cost_to_go(acresult: ACResult, problem: Problem, ks, options: SolverOptions | None = None, cache: dict | None = None) -> dict[int, float]:
    """Re-solved free-final-time cost from ``x_k`` for each requested ``k``.

    Each re-solve is warm-started with the tail ``u_k, ..., u_{T*-1}`` of the
    original solution. Values are memoized in ``cache`` when one is given.
    """
    cache = {} if cache is None else cache
    sol = acresult.solution
    for k in sorted(set(ks)):
        if k in cache:
            continue
        sub = problem.with_x0(sol.states[k])
        try:
            cache[k] = cost_to_go(sub, acresult.M, sol.controls[k:], options).J_M
        except (HittingTimeNotFoundError, SolverDivergedError):
            # reported as an infinite violation by the checks
            cache[k] = float("nan")
    return cache


def _rel(violation: float, scale: float) -> float:
    if not np.isfinite(violation):
        return float("inf")
    return abs(violation) / max(abs(scale), 1e-300)


def check_bellman_consistency(
    acresult: ACResult,
    problem: Problem,
    stride: int = 10,
    tol: float = 1e-3,
    options: SolverOptions | None = None,
    cache: dict | None = None,
) -> CheckReport:
    """Relative residual of ``J(x_k) - c(x_k, u_k) - beta * J(x_{k+1})``.

    Sampled every ``stride`` steps plus the last step before the hit, keeping
    only states outside the terminal set. Inside it the cost-to-go is the
    constant ``M`` and the recursion does not apply.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    T_star = acresult.T_star
    sol, spec = acresult.solution, problem.cost
    ks = sorted(set(range(0, T_star, stride)) | ({T_star - 1} if T_star else set()))
    ks = [k for k in ks if costs.terminal_cost(spec, sol.states[k]) > acresult.M]
    J = recompute_cost_to_go(acresult, problem, ks + [k + 1 for k in ks], options, cache)
    violations, details = [], []
    for k in ks:
        c = costs.stage_cost(spec, sol.states[k], sol.controls[k])
        resid = J[k] - c - spec.beta * J[k + 1]
        v = _rel(resid, J[k])
        violations.append(v)
        details.append({"k": k, "J_k": J[k], "stage_cost": c, "J_next": J[k + 1], "relative_violation": v})
    return _report("bellman_consistency", violations, tol, details)


def check_lyapunov_decrease(
    acresult: ACResult,
    problem: Problem,
    tol: float = 1e-3,
    options: SolverOptions | None = None,
    cache: dict | None = None,
) -> CheckReport:
    """``beta * J(x_{k+1}) <= J(x_k) - c(x_k, u_k) + tol * J(x_0)`` outside the terminal set.

    The violation at ``k`` is ``(beta * J(x_{k+1}) - J(x_k) + c) / J(x_0)``; the
    check passes when the worst one is at most ``tol``.
    """
    T_star = acresult.T_star
    sol, spec = acresult.solution, problem.cost
    M = acresult.M
    outside = [k for k in range(T_star) if costs.terminal_cost(spec, sol.states[k]) > M]
    J = recompute_cost_to_go(acresult, problem, [0] + outside + [k + 1 for k in outside], options, cache)
    scale = J[0] if np.isfinite(J[0]) else acresult.J_M
    violations, details = [], []
    for k in outside:
        c = costs.stage_cost(spec, sol.states[k], sol.controls[k])
        excess = spec.beta * J[k + 1] - J[k] + c
        v = _rel(excess, scale) if np.isfinite(excess) else float("inf")
        if np.isfinite(excess) and excess < 0:
            v = -v
        violations.append(v)
        details.append({"k": k, "J_k": J[k], "J_next": J[k + 1], "stage_cost": c, "relative_excess": v})
    return _report("lyapunov_decrease", violations, tol, details)


def check_first_hit_minimality(acresult: ACResult) -> CheckReport:
    """Every swept horizon below ``T*`` must miss the terminal set."""
    bad = [r.T for r in acresult.sweep if r.T < acresult.T_star and r.hit]
    details = [{"T": T} for T in bad]
    return _report("first_hit_minimality", [float(len(bad))], 0.0, details)
