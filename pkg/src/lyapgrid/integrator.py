"""Trapezoidal time stepping with a Newton corrector and per-step tangent maps.

Any object with ``rhs(x)`` and ``jacobian(x)`` methods can be integrated; the
power-system model is adapted by :class:`PowerSystemODE`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .dynamics import ControlInput, MachineModel
from .errors import (NewtonConvergenceError, NumericalError, SingularJacobianError,
                     StepError)


class ODESystem(Protocol):
    def rhs(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SimConfig:
    """Step size ``h``, horizon ``t_end`` and Newton settings.

    The trajectory has ``N = t_end / h`` stored states, the first being the
    initial condition.
    """

    h: float = 0.1
    t_end: float = 30.0
    nr_tol: float = 1e-10
    nr_max_iter: int = 25

    def __post_init__(self):
        if not (self.h > 0 and self.t_end > 0 and self.nr_tol > 0 and self.nr_max_iter > 0):
            raise ValueError("h, t_end, nr_tol and nr_max_iter must be positive")
        ratio = self.t_end / self.h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 2:
            raise ValueError(f"t_end/h = {ratio} must be an integer of at least 2")

    @property
    def n_states(self) -> int:
        return int(round(self.t_end / self.h))

    @property
    def h_tilde(self) -> float:
        return 0.5 * self.h


class LinearSystem:
    """``x' = A x``; handy for closed-form checks."""

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))

    def rhs(self, x):
        return self.A @ x

    def jacobian(self, x):
        return self.A


class PowerSystemODE:
    """Reduced ODE of the machine-network DAE for fixed control inputs."""

    def __init__(self, model: MachineModel, u: ControlInput):
        self.model = model
        self.u = u

    def rhs(self, x):
        return self.model.ode_rhs(x, self.u)

    def jacobian(self, x):
        return self.model.ode_jacobian(x, self.u)

    def pivot_ratio(self, x) -> float:
        """Smallest over largest LU pivot magnitude of G_xa (raises if singular)."""
        lu, _ = self.model.factor_algebraic(x)
        p = np.abs(np.diag(lu))
        return float(p.min() / p.max())


@dataclass(frozen=True)
class Trajectory:
    """Accepted states (``N x n``), their times, and optional tangent maps (``N-1 x n x n``)."""

    times: np.ndarray
    states: np.ndarray
    step_maps: np.ndarray | None
    nr_iterations: np.ndarray
    pivot_ratios: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return len(self.times)


def _newton_solve(A, b):
    try:
        dx = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("trapezoidal step Jacobian is singular") from None
    if not np.all(np.isfinite(dx)):
        raise SingularJacobianError("trapezoidal step Jacobian is singular")
    return dx


def trapezoidal_step(system: ODESystem, x_prev, cfg: SimConfig, f_prev=None):
    """Solve ``x = x_prev + h~ (fhat(x) + fhat(x_prev))`` by full Newton.

    The iteration starts from ``x_prev`` and stops once the Euclidean norm of
    the Newton increment is at most ``cfg.nr_tol``.

    Returns
    -------
    x_next : ndarray
    iterations : int
        Number of Newton increments taken.
    """
    ht = cfg.h_tilde
    f_prev = system.rhs(x_prev) if f_prev is None else f_prev
    x = np.array(x_prev, dtype=float)
    eye = np.eye(x.size)
    step = math.inf
    for it in range(1, cfg.nr_max_iter + 1):
        resid = x - x_prev - ht * (system.rhs(x) + f_prev)
        dx = _newton_solve(eye - ht * system.jacobian(x), -resid)
        x = x + dx
        step = float(np.linalg.norm(dx))
        if step <= cfg.nr_tol:
            return x, it
    resid = x - x_prev - ht * (system.rhs(x) + f_prev)
    raise NewtonConvergenceError(
        f"Newton did not converge in {cfg.nr_max_iter} iterations "
        f"(last increment {step:.3e})", residual=float(np.linalg.norm(resid)), step=step)


def step_variational_map(system: ODESystem, x_prev, x_next, cfg: SimConfig,
                         J_prev=None, J_next=None):
    """Tangent map of one trapezoidal step, ``(I - h~ J_next)^{-1} (I + h~ J_prev)``."""
    ht = cfg.h_tilde
    J_prev = system.jacobian(x_prev) if J_prev is None else J_prev
    J_next = system.jacobian(x_next) if J_next is None else J_next
    eye = np.eye(len(x_prev))
    try:
        return np.linalg.solve(eye - ht * J_next, eye + ht * J_prev)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("I - h~ J is singular in the tangent map") from None


def simulate(system: ODESystem, x0, cfg: SimConfig, variational: bool = False) -> Trajectory:
    """Advance ``N - 1`` trapezoidal steps from ``x0``.

    With ``variational=True`` the tangent map of every step is stored as well.
    Failures are re-raised as :class:`StepError` carrying the index of the
    state being solved.
    """
    N = cfg.n_states
    x0 = np.asarray(x0, dtype=float)
    states = np.empty((N, x0.size))
    states[0] = x0
    maps = np.empty((N - 1, x0.size, x0.size)) if variational else None
    iters = np.zeros(N - 1, dtype=int)
    monitor = getattr(system, "pivot_ratio", None)
    pivots = np.empty(N) if monitor is not None else None

    k = 0
    try:
        f_prev = system.rhs(x0)
        J_prev = system.jacobian(x0) if variational else None
        if monitor is not None:
            pivots[0] = monitor(x0)
        for k in range(1, N):
            x, iters[k - 1] = trapezoidal_step(system, states[k - 1], cfg, f_prev)
            f_prev = system.rhs(x)
            if monitor is not None:
                pivots[k] = monitor(x)
            if variational:
                J_next = system.jacobian(x)
                phi = step_variational_map(system, states[k - 1], x, cfg, J_prev, J_next)
                if not np.all(np.isfinite(phi)):
                    raise NumericalError("non-finite tangent map")
                maps[k - 1] = phi
                J_prev = J_next
            states[k] = x
    except NumericalError as exc:
        raise StepError(str(exc), step=k, cause=exc) from exc
    return Trajectory(times=np.arange(N) * cfg.h, states=states, step_maps=maps,
                      nr_iterations=iters, pivot_ratios=pivots)


def settling_time(times, signals, band: float = 0.02) -> float:
    """Time after which every signal stays within ``band`` times the peak excursion.

    Excursions are measured from each signal's final value. Returns ``times[0]``
    for signals that never move.
    """
    signals = np.asarray(signals, dtype=float).reshape(len(times), -1)
    dev = np.max(np.abs(signals - signals[-1]), axis=1)
    peak = dev.max()
    if peak == 0:
        return float(times[0])
    outside = np.flatnonzero(dev > band * peak)
    if outside.size == 0:
        return float(times[0])
    last = outside[-1]
    return float(times[min(last + 1, len(times) - 1)])
