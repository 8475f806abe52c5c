"""Fixed-step explicit integrators that work on plain arrays and tape Values alike.

Gradients are obtained by differentiating through the unrolled steps, so every
operation inside a step must be a tape primitive when Values are passed in.
Reverse-time integration just uses a negative step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Value

Field = Callable[..., object]


class IntegrationError(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class IntegrationSpec:
    t0: float = 0.0
    t1: float = 1.0
    n_steps: int = 20
    method: str = "rk4"

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def step(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def reversed(self) -> "IntegrationSpec":
        return IntegrationSpec(self.t1, self.t0, self.n_steps, self.method)


FLOW_SPEC = IntegrationSpec(0.0, 1.0, 20, "rk4")


def _data(y):
    return y.data if isinstance(y, Value) else np.asarray(y)


def _check(y, step: int):
    if not np.all(np.isfinite(_data(y))):
        raise IntegrationError(step)


def euler_step(field: Field, y, t, dt, context=None):
    return y + field(y, t, context) * dt


def rk4_step(field: Field, y, t, dt, context=None):
    """One classical Runge-Kutta step; ``dt`` may be a scalar or a per-row column."""
    half = dt * 0.5
    k1 = field(y, t, context)
    k2 = field(y + k1 * half, t + half, context)
    k3 = field(y + k2 * half, t + half, context)
    k4 = field(y + k3 * dt, t + dt, context)
    return y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)


_STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def integrate(field: Field, y0, spec: IntegrationSpec = FLOW_SPEC, context=None):
    """Return y(t1) for dy/dt = field(y, t, context), y(t0) = y0."""
    _check(y0, 0)
    stepper = _STEPPERS[spec.method]
    dt = spec.step
    y = y0
    for i in range(spec.n_steps):
        y = stepper(field, y, spec.t0 + i * dt, dt, context)
        _check(y, i + 1)
    return y


def integrate_augmented(field: Field, trace_fn: Callable, y0, ell0,
                        spec: IntegrationSpec = FLOW_SPEC, context=None):
    """Jointly integrate the state and a log-density accumulator.

    ``trace_fn(y, t, context)`` returns Tr[df/dy]; the accumulator obeys
    d ell/dt = -Tr[df/dy].
    """

    def joint(state, t, ctx):
        y, _ = state
        return field(y, t, ctx), -trace_fn(y, t, ctx)

    def pair_stepper(state, t, dt):
        # rk4 / euler on the (y, ell) pair without building tuples of Values
        y, ell = state
        if spec.method == "euler":
            dy, dl = joint(state, t, context)
            return y + dy * dt, ell + dl * dt
        half = dt * 0.5
        k1y, k1l = joint((y, ell), t, context)
        k2y, k2l = joint((y + k1y * half, ell + k1l * half), t + half, context)
        k3y, k3l = joint((y + k2y * half, ell + k2l * half), t + half, context)
        k4y, k4l = joint((y + k3y * dt, ell + k3l * dt), t + dt, context)
        return (y + (k1y + k2y * 2.0 + k3y * 2.0 + k4y) * (dt / 6.0),
                ell + (k1l + k2l * 2.0 + k3l * 2.0 + k4l) * (dt / 6.0))

    _check(y0, 0)
    dt = spec.step
    state = (y0, ell0)
    for i in range(spec.n_steps):
        state = pair_stepper(state, spec.t0 + i * dt, dt)
        _check(state[0], i + 1)
        _check(state[1], i + 1)
    return state


def micro_grid(t_from: np.ndarray, t_to: np.ndarray, max_step: float):
    """Per-row step counts and sizes for event-to-event evolution.

    Row ``i`` takes ``ceil(gap_i / max_step)`` equal steps; rows needing fewer
    steps than the batch maximum are padded with zero-length steps, which the
    explicit schemes treat as the identity.
    """
    gap = np.asarray(t_to, dtype=np.float64) - np.asarray(t_from, dtype=np.float64)
    if np.any(gap < 0):
        raise ValueError("t_to must not precede t_from")
    counts = np.ceil(gap / max_step - 1e-12).astype(int)
    counts = np.where(gap > 0, np.maximum(counts, 1), 0)
    n = int(counts.max()) if counts.size else 0
    sizes = np.where(counts > 0, gap / np.maximum(counts, 1), 0.0)
    return counts, sizes, n


def integrate_rows(field: Field, y0, t_from: np.ndarray, t_to: np.ndarray,
                   max_step: float = 0.05, method: str = "rk4", context=None):
    """Integrate each row of ``y0`` (B, H) over its own interval [t_from_i, t_to_i]."""
    counts, sizes, n = micro_grid(t_from, t_to, max_step)
    stepper = _STEPPERS[method]
    t = np.asarray(t_from, dtype=np.float64).reshape(-1, 1).copy()
    y = y0
    for i in range(n):
        dt = np.where(counts > i, sizes, 0.0).reshape(-1, 1)
        y = stepper(field, y, t, dt, context)
        t = t + dt
        _check(y, i + 1)
    return y
