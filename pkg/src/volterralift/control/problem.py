"""Control problem data, policies and the Hamiltonian.

Actions are addressed by their index in ``ControlProblem.actions`` and marks
by their index in the Lévy model.  Problem callables are vectorized over an
ensemble of ``P`` states:

``intensity(t, u, i, a)``   u: (P, d), i: mark index, a: (P,) ints -> (P,)
``running_cost(t, u, a)``   -> (P,)
``terminal_cost(u)``        -> (P,)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..kernel import BernsteinMeasure
from ..levy import IntensityBoundError, LevyModel
from ..lift import CoefficientSet, LiftState, _check_grid, _initial_field, _project


class ProblemError(ValueError):
    pass


@dataclass
class ControlProblem:
    measure: BernsteinMeasure
    coeffs: CoefficientSet
    levy: LevyModel
    y0: np.ndarray
    grid: np.ndarray
    actions: Sequence
    intensity: Callable
    bound: float
    running_cost: Callable
    terminal_cost: Callable
    alpha: float = 2.0

    def __post_init__(self):
        self.grid = _check_grid(self.grid)
        self.y0 = _initial_field(self.measure, self.y0)
        if len(self.actions) == 0:
            raise ProblemError("action set U is empty")
        if not self.bound > 0:
            raise ProblemError("intensity bound C_r must be positive")
        if not self.alpha > 1:
            raise ProblemError("integrability exponent alpha must exceed 1")

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def dim(self) -> int:
        return self.y0.shape[1]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def rates_matrix(self, t: float, u: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Intensities ``r(t, u, xi_i, a)`` as a (P, n_marks) array, checked against ``(0, C_r]``."""
        P = u.shape[0]
        R = np.empty((P, self.levy.n_marks))
        for i in range(self.levy.n_marks):
            R[:, i] = np.broadcast_to(self.intensity(t, u, i, a), (P,))
        bad = ~((R > 0) & (R <= self.bound))
        if np.any(bad):
            p, i = np.argwhere(bad)[0]
            raise IntensityBoundError(
                f"intensity r={R[p, i]!r} outside (0, C_r={self.bound}] at t={t!r}, "
                f"mark={int(i)}, action={self.actions[int(a[p])]!r}"
            )
        return R

    def validate(self, n_probe: int = 10_000, scale: float = 5.0, seed: int = 0) -> None:
        """Probe ``0 < r <= C_r`` and finiteness of ``inf_U l`` on random inputs."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0.0, self.T, n_probe)
        u = rng.uniform(-scale, scale, (n_probe, self.dim))
        a = rng.integers(0, self.n_actions, n_probe)
        for k in range(0, n_probe, 1000):
            sl = slice(k, k + 1000)
            self.rates_matrix(float(t[k]), u[sl], a[sl])
        costs = np.stack([
            np.broadcast_to(self.running_cost(float(t[0]), u, np.full(n_probe, c)), (n_probe,))
            for c in range(self.n_actions)
        ])
        if not np.all(np.isfinite(costs.min(axis=0))):
            raise ProblemError("inf over U of the running cost is not finite on the probe set")


@dataclass
class Policy:
    """Admissible control.

    ``kind`` is ``constant``, ``schedule`` (one action per grid cell) or
    ``feedback``; feedback maps receive the grid index, the time, the
    pre-jump lift ensemble ``(P, N, d)`` and its projection ``(P, d)``.
    """

    kind: str
    value: object
    name: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def constant(cls, action: int, name: str = "") -> "Policy":
        return cls("constant", int(action), name or f"constant[{action}]")

    @classmethod
    def schedule(cls, actions, name: str = "") -> "Policy":
        return cls("schedule", np.asarray(actions, dtype=np.int64), name or "schedule")

    @classmethod
    def feedback(cls, fn: Callable, name: str = "feedback", **meta) -> "Policy":
        return cls("feedback", fn, name, dict(meta))

    def act(self, k: int, t: float, Y: np.ndarray, u: np.ndarray) -> np.ndarray:
        P = Y.shape[0]
        if self.kind == "constant":
            return np.full(P, self.value, dtype=np.int64)
        if self.kind == "schedule":
            return np.full(P, int(self.value[k]), dtype=np.int64)
        return np.asarray(self.value(k, t, Y, u), dtype=np.int64).reshape(P)

    def __call__(self, k: int, t: float, state: LiftState) -> int:
        Y = state.values[None]
        return int(self.act(k, t, Y, _project(state.measure, Y))[0])


def hamiltonian_batch(problem: ControlProblem, t: float, u: np.ndarray, z: np.ndarray):
    """Hamiltonian and its lowest-index minimizer for ``P`` states at once.

    ``z`` has shape (P, n_marks).  Returns ``(values (P,), argmin (P,), table (P, |U|))``.
    """
    P = u.shape[0]
    lam = problem.levy.rates
    table = np.empty((P, problem.n_actions))
    for c in range(problem.n_actions):
        a = np.full(P, c, dtype=np.int64)
        R = problem.rates_matrix(t, u, a)
        l = np.broadcast_to(problem.running_cost(t, u, a), (P,))
        table[:, c] = l + np.sum(z * (R - 1.0) * lam, axis=1)
    arg = np.argmin(table, axis=1)
    return table[np.arange(P), arg], arg, table


def hamiltonian(s: float, u, z, problem: ControlProblem) -> tuple[float, int]:
    """Infimum over the finite action set of ``l + sum_i z_i (r_i - 1) lambda_i``.

    Ties go to the lowest action index.
    """
    z = np.asarray(z, dtype=float).reshape(1, -1)
    if z.shape[1] != problem.levy.n_marks:
        raise ProblemError("z needs one entry per mark")
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(1, -1)
    val, arg, _ = hamiltonian_batch(problem, s, u, z)
    return float(val[0]), int(arg[0])


def lipschitz_constant(problem: ControlProblem) -> float:
    """``(C_r + 1) * nu(R^n \\ {0})**(1/2)``."""
    return (problem.bound + 1.0) * np.sqrt(problem.levy.total_rate)
