"""Quadratic stage and terminal costs about a goal state, with discounting.

Costs are written in goal-shifted coordinates ``e = x - goal``::

    stage_cost(x, u)   = e' Q e + u' R u
    terminal_cost(x)   = e' Q_T e              # phi(x)
    effective_terminal = max(phi(x), M)

With a discount ``beta`` the stage cost at step ``k`` is weighted by
``beta**k`` and the terminal term of a horizon-``T`` problem by ``beta**T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .dynamics import DimensionError

Array = npt.NDArray[np.float64]


def _as_matrix(value, size: int, name: str) -> Array:
    mat = np.asarray(value, dtype=float)
    if mat.ndim == 1:
        mat = np.diag(mat)
    if mat.shape != (size, size):
        raise DimensionError(f"{name} must be {size}x{size} (or a length-{size} diagonal), got {mat.shape}")
    if not np.allclose(mat, mat.T):
        raise ValueError(f"{name} must be symmetric")
    return mat


def _min_eig(mat: Array) -> float:
    return float(np.linalg.eigvalsh(mat).min()) if mat.size else 0.0


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Goal, weights and discount of a quadratic regulation cost.

    ``Q`` must be PSD and ``R`` PD. ``Q_T`` must be PD, except that an
    all-zero ``Q_T`` is accepted to express a terminal-cost-free problem
    (used for long-horizon reference solves).
    """

    goal: Array
    Q: Array
    R: Array
    Q_T: Array
    beta: float = 1.0

    def __post_init__(self) -> None:
        goal = np.asarray(self.goal, dtype=float).ravel()
        n = goal.size
        Q = _as_matrix(self.Q, n, "Q")
        Q_T = _as_matrix(self.Q_T, n, "Q_T")
        R = np.atleast_1d(np.asarray(self.R, dtype=float))
        R = _as_matrix(R, R.shape[0], "R")
        if _min_eig(Q) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if _min_eig(R) <= 0:
            raise ValueError("R must be positive definite")
        if np.any(Q_T != 0) and _min_eig(Q_T) <= 0:
            raise ValueError("Q_T must be positive definite (or identically zero)")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        for name, val in (("goal", goal), ("Q", Q), ("R", R), ("Q_T", Q_T)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.goal.size

    @property
    def p(self) -> int:
        return self.R.shape[0]

    def without_terminal(self) -> "CostSpec":
        return CostSpec(self.goal, self.Q, self.R, np.zeros_like(self.Q_T), self.beta)

    def with_terminal(self, Q_T) -> "CostSpec":
        return CostSpec(self.goal, self.Q, self.R, Q_T, self.beta)

    def with_beta(self, beta: float) -> "CostSpec":
        return CostSpec(self.goal, self.Q, self.R, self.Q_T, beta)


@dataclass(frozen=True)
class QuadExpansion:
    """Second-order expansion of a (weighted) cost term about ``(x, u)``."""

    c_x: Array
    c_u: Array
    c_xx: Array
    c_uu: Array
    c_ux: Array
    value: float


@dataclass(frozen=True)
class CostBreakdown:
    transfer: float
    terminal: float
    total: float


def _check(spec: CostSpec, x: Array, u: Array | None = None) -> None:
    if x.shape[-1:] != (spec.n,):
        raise DimensionError(f"state dimension {x.shape} does not match goal dimension {spec.n}")
    if u is not None and u.shape[-1:] != (spec.p,):
        raise DimensionError(f"control dimension {u.shape} does not match R dimension {spec.p}")


def _quad(e: Array, W: Array) -> Array:
    return np.einsum("...i,ij,...j->...", e, W, e)


def stage_cost(spec: CostSpec, x, u):
    """Undiscounted incremental cost ``c(x, u)``; batched over leading axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check(spec, x, u)
    out = _quad(x - spec.goal, spec.Q) + _quad(u, spec.R)
    return float(out) if out.ndim == 0 else out


def terminal_cost(spec: CostSpec, x):
    """Heuristic terminal cost ``phi(x)``; zero only at the goal."""
    x = np.asarray(x, dtype=float)
    _check(spec, x)
    out = _quad(x - spec.goal, spec.Q_T)
    return float(out) if out.ndim == 0 else out


def effective_terminal(spec: CostSpec, x, M: float) -> float:
    if M < 0:
        raise ValueError(f"terminal-set level M must be non-negative, got {M}")
    return max(terminal_cost(spec, x), M)


def in_terminal_set(spec: CostSpec, x, M: float) -> bool:
    """Membership in the sublevel set ``{x : phi(x) <= M}``."""
    return bool(terminal_cost(spec, x) <= M)


def quadratize(spec: CostSpec, x, u, k: int, T: int) -> QuadExpansion:
    """Exact expansion of the step-``k`` cost term of a horizon-``T`` problem.

    For ``k < T`` this is ``beta**k * c(x, u)``; for ``k == T`` it is the
    terminal term ``beta**T * phi(x)`` and the control blocks are zero.
    """
    if not 0 <= k <= T:
        raise ValueError(f"need 0 <= k <= T, got k={k}, T={T}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check(spec, x, u)
    e = x - spec.goal
    if k == T:
        w = spec.beta**T
        return QuadExpansion(
            c_x=2.0 * w * spec.Q_T @ e,
            c_u=np.zeros(spec.p),
            c_xx=2.0 * w * spec.Q_T,
            c_uu=np.zeros((spec.p, spec.p)),
            c_ux=np.zeros((spec.p, spec.n)),
            value=w * float(e @ spec.Q_T @ e),
        )
    w = spec.beta**k
    return QuadExpansion(
        c_x=2.0 * w * spec.Q @ e,
        c_u=2.0 * w * spec.R @ u,
        c_xx=2.0 * w * spec.Q,
        c_uu=2.0 * w * spec.R,
        c_ux=np.zeros((spec.p, spec.n)),
        value=w * float(e @ spec.Q @ e + u @ spec.R @ u),
    )


@dataclass(frozen=True)
class TrajectoryExpansion:
    """Stacked expansions along a trajectory (stage blocks have length ``T``)."""

    lx: Array  # (T+1, n), last row is the terminal gradient
    lu: Array  # (T, p)
    lxx: Array  # (T+1, n, n)
    luu: Array  # (T, p, p)
    lux: Array  # (T, p, n)


def quadratize_trajectory(spec: CostSpec, states: Array, controls: Array, discounted: bool = True) -> TrajectoryExpansion:
    """Expansions of every cost term along ``(states, controls)``.

    With ``discounted=False`` the blocks are left unweighted by ``beta**k``;
    the solver then applies the discount inside its value recursion, which
    avoids underflow on long horizons with small ``beta``.
    """
    T = controls.shape[0]
    if states.shape[0] != T + 1:
        raise DimensionError(f"need T+1 states for T controls, got {states.shape[0]} and {T}")
    _check(spec, states, controls)
    if discounted and spec.beta != 1.0:
        w = spec.beta ** np.arange(T + 1)
    else:
        w = np.ones(T + 1)
    e = states - spec.goal
    lx = 2.0 * w[:, None] * (e @ spec.Q.T)
    lx[T] = 2.0 * w[T] * spec.Q_T @ e[T]
    lxx = 2.0 * w[:, None, None] * spec.Q
    lxx[T] = 2.0 * w[T] * spec.Q_T
    lu = 2.0 * w[:T, None] * (controls @ spec.R.T)
    luu = 2.0 * w[:T, None, None] * spec.R
    lux = np.zeros((T, spec.p, spec.n))
    return TrajectoryExpansion(lx=lx, lu=lu, lxx=lxx, luu=luu, lux=lux)


def trajectory_cost(spec: CostSpec, states, controls, M: float = 0.0, use_effective_terminal: bool = False) -> CostBreakdown:
    """Discounted transfer cost plus (optionally max-ed) terminal cost."""
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(-1, spec.p)
    T = controls.shape[0]
    if states.shape != (T + 1, spec.n):
        raise DimensionError(f"need {T + 1} states of dimension {spec.n}, got {states.shape}")
    stage = np.atleast_1d(stage_cost(spec, states[:T], controls)) if T else np.zeros(0)
    if spec.beta != 1.0:
        stage = stage * spec.beta ** np.arange(T)
    transfer = float(np.sum(stage))
    phi = terminal_cost(spec, states[T])
    if use_effective_terminal:
        phi = max(phi, M)
    terminal = spec.beta**T * phi
    return CostBreakdown(transfer=transfer, terminal=terminal, total=transfer + terminal)
