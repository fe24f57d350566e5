"""Nonholonomic robot models and their RK4 discretization.

Three models are provided, all written in continuous time and turned into a
discrete map ``x_{k+1} = f(x_k, u_k)`` by one classical Runge-Kutta step with
the control held constant over the step:

* ``car_like``: kinematic bicycle, state ``(px, py, heading, speed)``,
  input ``(acceleration, steering angle)``.
* ``unicycle``: state ``(px, py, heading)``, input ``(speed, turn rate)``.
* ``double_integrator``: state ``(q, qdot)``, input ``(acceleration,)``.

Every function accepts arrays with arbitrary leading batch dimensions, which
the solver uses to linearize a whole trajectory in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.float64]

MODEL_DIMS: dict[str, tuple[int, int]] = {
    "car_like": (4, 2),
    "unicycle": (3, 2),
    "double_integrator": (2, 1),
}

DEFAULT_DT = {"car_like": 0.01, "unicycle": 0.05, "double_integrator": 0.1}


class DimensionError(ValueError):
    """A state or control vector does not match the model dimensions."""


class NumericOverflowError(FloatingPointError):
    """Integration produced a non-finite state.

    ``index`` is the step at which the state first became non-finite
    (``None`` for a single call to :func:`step`).
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Model:
    """A model identifier plus its physical and discretization parameters."""

    name: str
    dt: float | None = None
    wheelbase: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in MODEL_DIMS:
            raise ValueError(f"unknown model {self.name!r}; expected one of {sorted(MODEL_DIMS)}")
        if self.dt is None:
            object.__setattr__(self, "dt", DEFAULT_DT[self.name])
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.wheelbase > 0:
            raise ValueError(f"wheelbase must be positive, got {self.wheelbase}")

    @property
    def n(self) -> int:
        return MODEL_DIMS[self.name][0]

    @property
    def p(self) -> int:
        return MODEL_DIMS[self.name][1]


@dataclass(frozen=True)
class Linearization:
    A: Array
    B: Array
    x: Array
    u: Array


def _check_dims(model: Model, x: Array, u: Array) -> None:
    if x.shape[-1:] != (model.n,):
        raise DimensionError(f"{model.name} expects state dimension {model.n}, got shape {x.shape}")
    if u.shape[-1:] != (model.p,):
        raise DimensionError(f"{model.name} expects control dimension {model.p}, got shape {u.shape}")


def _derivative(model: Model, x: Array, u: Array) -> Array:
    if model.name == "car_like":
        theta, v = x[..., 2], x[..., 3]
        accel, steer = u[..., 0], u[..., 1]
        return np.stack(
            [v * np.cos(theta), v * np.sin(theta), v * np.tan(steer) / model.wheelbase, accel],
            axis=-1,
        )
    if model.name == "unicycle":
        theta = x[..., 2]
        v, omega = u[..., 0], u[..., 1]
        return np.stack([v * np.cos(theta), v * np.sin(theta), omega], axis=-1)
    # double integrator
    return np.stack([x[..., 1], u[..., 0]], axis=-1)


def continuous_derivative(model: Model, x, u) -> Array:
    """Return the state derivative ``xdot`` at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(model, x, u)
    return _derivative(model, x, u)


def _rk4(model: Model, x: Array, u: Array, dt: float) -> Array:
    k1 = _derivative(model, x, u)
    k2 = _derivative(model, x + 0.5 * dt * k1, u)
    k3 = _derivative(model, x + 0.5 * dt * k2, u)
    k4 = _derivative(model, x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(model: Model, x, u, dt: float | None = None) -> Array:
    """Advance the state by one RK4 step under a zero-order-hold control."""
    dt = model.dt if dt is None else dt
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(model, x, u)
    with np.errstate(all="ignore"):
        out = _rk4(model, x, u, dt)
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError(f"non-finite state after RK4 step of {model.name} (dt={dt})")
    return out


def linearize(model: Model, x, u, dt: float | None = None) -> Linearization:
    """Jacobians of :func:`step` by central differences.

    The perturbation on coordinate ``z_i`` is ``1e-6 * max(1, |z_i|)``.
    Batched inputs give batched ``A`` (``(..., n, n)``) and ``B`` (``(..., n, p)``).
    """
    dt = model.dt if dt is None else dt
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(model, x, u)
    n, p = model.n, model.p
    z = np.concatenate([x, u], axis=-1)
    h = 1e-6 * np.maximum(1.0, np.abs(z))  # (..., n+p)
    eye = np.eye(n + p)
    # (..., n+p, n+p): row j is z perturbed along coordinate j
    dz = eye * h[..., None, :]
    zp = z[..., None, :] + dz
    zm = z[..., None, :] - dz
    with np.errstate(all="ignore"):
        fp = _rk4(model, zp[..., :n], zp[..., n:], dt)
        fm = _rk4(model, zm[..., :n], zm[..., n:], dt)
    # (..., n+p, n) -> Jacobian (..., n, n+p)
    jac = np.swapaxes((fp - fm) / (2.0 * h[..., :, None]), -1, -2)
    if not np.all(np.isfinite(jac)):
        raise NumericOverflowError(f"non-finite Jacobian for {model.name}")
    return Linearization(A=jac[..., :n], B=jac[..., n:], x=x, u=u)


def rollout(model: Model, x0, controls, dt: float | None = None) -> Array:
    """Simulate ``len(controls)`` steps from ``x0``; returns ``(T+1, n)`` states."""
    dt = model.dt if dt is None else dt
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(-1, model.p)
    _check_dims(model, x0, controls)
    T = controls.shape[0]
    states = np.empty((T + 1, model.n))
    states[0] = x0
    with np.errstate(all="ignore"):
        for k in range(T):
            states[k + 1] = _rk4(model, states[k], controls[k], dt)
    _raise_if_nonfinite(states)
    return states


def _raise_if_nonfinite(states: Array) -> None:
    bad = ~np.all(np.isfinite(states), axis=1)
    if bad.any():
        k = int(np.argmax(bad)) - 1
        raise NumericOverflowError(f"rollout produced a non-finite state at step {k}", index=k)
