"""Fixed-step explicit Runge-Kutta integration.

Fixed step (not adaptive) on purpose: the shooting solver differentiates the
flow map by finite differences, and adaptive step-size switching would make
that map piecewise in its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

Array = np.ndarray
VectorField = Callable[[float, Array], Array]


class IntegrationError(RuntimeError):
    """A stage evaluation produced a non-finite value."""

    def __init__(self, stage: int, t: float) -> None:
        super().__init__(
            f"non-finite value in RK4 stage {stage} at t = {t:.6g}"
        )
        self.stage = stage
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of `steps` intervals on [t0, tf]."""

    t0: float
    tf: float
    steps: int

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ValueError(f"TimeGrid.steps must be positive, got {self.steps}")
        if not self.tf > self.t0:
            raise ValueError(
                f"TimeGrid requires tf > t0, got t0={self.t0}, tf={self.tf}"
            )

    @property
    def h(self) -> float:
        return (self.tf - self.t0) / self.steps

    def times(self) -> Array:
        return self.t0 + self.h * np.arange(self.steps + 1)


def rk4_step(f: VectorField, t: float, y: Array, h: float) -> Array:
    """One classical Runge-Kutta 4 update from (t, y) with step h."""
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(t, y), dtype=float)
    if not np.all(np.isfinite(k1)):
        raise IntegrationError(1, t)
    k2 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k1), dtype=float)
    if not np.all(np.isfinite(k2)):
        raise IntegrationError(2, t)
    k3 = np.asarray(f(t + 0.5 * h, y + 0.5 * h * k2), dtype=float)
    if not np.all(np.isfinite(k3)):
        raise IntegrationError(3, t)
    k4 = np.asarray(f(t + h, y + h * k3), dtype=float)
    if not np.all(np.isfinite(k4)):
        raise IntegrationError(4, t)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(f: VectorField, y0: Array, grid: TimeGrid) -> tuple[Array, Array]:
    """Integrate y' = f(t, y) over the grid.

    Returns (times, states) with times of length N+1 and states of shape
    (N+1, dim); states[0] is y0.
    """
    y0 = np.asarray(y0, dtype=float)
    times = grid.times()
    out = np.empty((grid.steps + 1, y0.size))
    out[0] = y0
    h = grid.h
    for k in range(grid.steps):
        out[k + 1] = rk4_step(f, times[k], out[k], h)
    return times, out
