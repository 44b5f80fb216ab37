"""Fixed-step classical Runge-Kutta integration with uniform recording."""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DivergenceError, InvalidInputError

__all__ = ["OdeProblem", "Trajectory", "rk4_step", "integrate"]


@dataclass
class OdeProblem:
    """Initial value problem ``y' = rhs(t, y)`` on ``[0, T]``.

    ``y0`` may have any shape; a stack of independent systems can be advanced
    together as long as ``rhs`` is vectorized over the leading axes.
    ``observe`` maps a state to the quantity that is recorded (default: the
    state itself), which keeps memory bounded for large ensembles.
    """

    rhs: Callable[[float, np.ndarray], np.ndarray]
    y0: np.ndarray
    T: float
    dt: float
    record_every: int = 1
    observe: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        if not self.T >= 0:
            raise InvalidInputError(f"T must be non-negative, got {self.T}")
        if int(self.record_every) < 1:
            raise InvalidInputError("record_every must be at least 1")
        self.record_every = int(self.record_every)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    steps: int
    #: length of the final shortened step, or None if T was a whole number of steps
    partial_step: Optional[float] = None

    @property
    def final(self):
        return self.states[-1]


def rk4_step(rhs, t, y, dt):
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_count(T, dt):
    ratio = T / dt
    whole = round(ratio)
    if abs(ratio - whole) <= 4 * np.finfo(float).eps * max(1.0, ratio):
        return int(whole), None
    whole = int(np.floor(ratio))
    return whole, T - whole * dt


def integrate(problem):
    """Integrate with classical RK4 and return the recorded trajectory.

    The trajectory always contains ``t = 0`` and ``t = T``.  When ``T`` is not
    a whole number of steps, a final shortened step lands exactly on ``T``.

    Raises
    ------
    DivergenceError
        As soon as a non-finite value appears; ``err.time`` is the time of the
        offending state.
    """
    observe = problem.observe or (lambda y: np.array(y, copy=True))
    y = np.array(problem.y0, dtype=float)
    rhs, dt = problem.rhs, problem.dt
    if not np.all(np.isfinite(rhs(0.0, y))):
        raise DivergenceError("right-hand side is not finite at the initial state", time=0.0)

    n_steps, partial = _step_count(problem.T, dt)
    times, states = [0.0], [observe(y)]
    t = 0.0
    for step in range(1, n_steps + 1):
        y = rk4_step(rhs, t, y, dt)
        t = problem.T if (step == n_steps and partial is None) else step * dt
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at t={t:.6g}", time=t)
        if step % problem.record_every == 0 or (step == n_steps and partial is None):
            times.append(t)
            states.append(observe(y))
    if partial is not None:
        y = rk4_step(rhs, t, y, partial)
        t = problem.T
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at t={t:.6g}", time=t)
        times.append(t)
        states.append(observe(y))
    return Trajectory(np.asarray(times), np.asarray(states), n_steps + (partial is not None), partial)
