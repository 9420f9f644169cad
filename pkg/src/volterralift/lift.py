"""Markovian lift of the Volterra equation on an atomic Bernstein measure.

The lift keeps one ``R^d`` row per atom, ``Y[j] = Y(t, x_j)``.  The generator
is diagonal (``-x_j`` on row ``j``), so the semigroup is applied exactly and
the stepper is an exponential Euler scheme: drift and jump coefficients are
frozen at the left end of each step, jumps enter at their exact times.

Coefficient callables must broadcast over leading axes: ``f(t, u)`` with
``u`` of shape ``(..., d)`` and ``sigma(t, xi, u)`` with ``xi`` of shape
``(..., n)``; ``t`` is a scalar or an array shaped like ``u[..., :1]``.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernel import BernsteinMeasure
from .levy import JumpPath, LevyModel

logger = logging.getLogger(__name__)


@dataclass
class LiftState:
    values: np.ndarray
    measure: BernsteinMeasure
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.measure.n_atoms:
            raise ValueError(f"lift state has {v.shape[0]} rows for {self.measure.n_atoms} atoms")
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite lift state")
        self.values = v

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class CoefficientSet:
    f: Callable
    sigma: Callable
    lip_f: float = math.inf
    lip_sigma: float = math.inf

    def check_lipschitz(self, d: int, marks: np.ndarray, n_pairs: int = 100,
                        rng: np.random.Generator | None = None, scale: float = 10.0,
                        tol: float = 1e-9) -> bool:
        """Probe the declared Lipschitz constants on random pairs of states."""
        rng = rng or np.random.default_rng(0)
        u1 = rng.uniform(-scale, scale, (n_pairs, d))
        u2 = rng.uniform(-scale, scale, (n_pairs, d))
        t = rng.uniform(0, 1, (n_pairs, 1))
        dist = np.linalg.norm(u1 - u2, axis=1)
        df = np.linalg.norm(_as_rows(self.f(t, u1), n_pairs, d) - _as_rows(self.f(t, u2), n_pairs, d), axis=1)
        if np.any(df > self.lip_f * dist + tol):
            return False
        for xi in marks:
            xs = np.broadcast_to(xi, (n_pairs, xi.size))
            ds = np.linalg.norm(
                _as_rows(self.sigma(t, xs, u1), n_pairs, d) - _as_rows(self.sigma(t, xs, u2), n_pairs, d),
                axis=1,
            )
            if np.any(ds > self.lip_sigma * dist + tol):
                return False
        return True


def _as_rows(v, n: int, d: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=float), (n, d))


# --- array-level helpers (trailing axes (N, d)) -------------------------------

def _project(m: BernsteinMeasure, Y: np.ndarray) -> np.ndarray:
    return np.einsum("j,...jd->...d", m.weights, Y)


def _sq_norm(m: BernsteinMeasure, Y: np.ndarray, v: bool) -> np.ndarray:
    w = m.weights * m.omega
    if v:
        w = w * (1.0 + m.rates)
    return np.einsum("j,...jd->...", w, Y * Y)


def _phi(rates: np.ndarray, dt: float) -> np.ndarray:
    """``(1 - exp(-x dt)) / x``, equal to ``dt`` at ``x = 0``."""
    out = np.full(rates.shape, float(dt))
    pos = rates > 0
    out[pos] = -np.expm1(-rates[pos] * dt) / rates[pos]
    return out


def _compensator(coeffs: CoefficientSet, model: LevyModel, t, u: np.ndarray) -> np.ndarray:
    total = np.zeros_like(u)
    for xi, lam in zip(model.marks, model.rates):
        xs = np.broadcast_to(xi, u.shape[:-1] + xi.shape)
        total = total + lam * np.broadcast_to(coeffs.sigma(t, xs, u), u.shape)
    return total


def _advance(m: BernsteinMeasure, Y: np.ndarray, t: float, dt: float, coeffs: CoefficientSet,
             model: LevyModel, ev_rows: np.ndarray, ev_times: np.ndarray, ev_marks: np.ndarray) -> np.ndarray:
    """One exponential-Euler step of an ensemble ``Y`` of shape ``(P, N, d)``.

    ``ev_rows`` indexes the ensemble member of each event in ``(t, t + dt]``.
    """
    u = _project(m, Y)
    decay = np.exp(-m.rates * dt)
    phi = _phi(m.rates, dt)
    g = np.broadcast_to(coeffs.f(t, u), u.shape) - _compensator(coeffs, model, t, u)
    out = decay[:, None] * Y + phi[None, :, None] * g[:, None, :]
    if ev_times.size:
        u_ev = u[ev_rows]
        s = ev_times[:, None]
        jump = np.broadcast_to(coeffs.sigma(s, model.marks[ev_marks], u_ev), u_ev.shape)
        fac = np.exp(-np.multiply.outer(t + dt - ev_times, m.rates))
        np.add.at(out, ev_rows, fac[:, :, None] * jump[:, None, :])
    return out


def _initial_field(m: BernsteinMeasure, y0, d: int | None = None) -> np.ndarray:
    y = np.asarray(y0, dtype=float)
    if y.ndim == 0:
        y = np.full((m.n_atoms, d or 1), float(y))
    elif y.ndim == 1:
        y = np.broadcast_to(y, (m.n_atoms, y.size)).copy()
    if y.shape[0] != m.n_atoms:
        raise ValueError("initial field must have one row per atom")
    return y


def _event_cells(grid: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Index ``k`` of the cell ``(t_k, t_{k+1}]`` holding each event."""
    return np.searchsorted(grid, times, side="left") - 1


def _check_grid(grid, horizon: float | None = None) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")
    if horizon is not None and not math.isclose(grid[-1], horizon, rel_tol=1e-12, abs_tol=1e-15):
        raise ValueError(f"grid ends at {grid[-1]} but the jump path horizon is {horizon}")
    return grid


# --- public operations ----------------------------------------------------------

def immerse(v, m: BernsteinMeasure) -> LiftState:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return LiftState(np.tile(v, (m.n_atoms, 1)), m)


def project(m: BernsteinMeasure, Y: LiftState | np.ndarray) -> np.ndarray:
    arr = Y.values if isinstance(Y, LiftState) else np.asarray(Y, dtype=float)
    return _project(m, arr)


def h_norm(Y: LiftState) -> float:
    return math.sqrt(float(_sq_norm(Y.measure, Y.values, v=False)))


def v_norm(Y: LiftState) -> float:
    return math.sqrt(float(_sq_norm(Y.measure, Y.values, v=True)))


def dissipation(Y: LiftState) -> float:
    """``<B Y, Y>_H = -sum_j w_j omega(x_j) x_j |Y_j|^2``."""
    m = Y.measure
    return -float(np.sum(m.weights * m.omega * m.rates * np.sum(Y.values**2, axis=1)))


def semigroup_apply(Y: LiftState, t: float) -> LiftState:
    if t < 0:
        raise ValueError("semigroup needs t >= 0")
    decay = np.exp(-Y.measure.rates * t)
    return LiftState(decay[:, None] * Y.values, Y.measure, Y.time + t)


def forcing_eval(y0, m: BernsteinMeasure, t):
    """Forcing ``x(t) = sum_j w_j exp(-x_j t) y0_j`` for scalar or array ``t``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("forcing needs t >= 0")
    y = _initial_field(m, y0)
    return np.exp(-np.multiply.outer(t, m.rates)) * m.weights @ y


def step(state: LiftState, coeffs: CoefficientSet, model: LevyModel, event_times, event_marks,
         dt: float) -> LiftState:
    """Advance a single lift state over ``(t, t + dt]`` given the events in that window."""
    if dt <= 0:
        raise ValueError("step needs dt > 0")
    ev_t = np.asarray(event_times, dtype=float).reshape(-1)
    ev_m = np.asarray(event_marks, dtype=np.int64).reshape(-1)
    if np.any(np.diff(ev_t) < 0):
        raise ValueError("events must be sorted")
    if ev_t.size and (ev_t[0] <= state.time or ev_t[-1] > state.time + dt * (1 + 1e-12)):
        raise ValueError("events must lie in (t, t + dt]")
    out = _advance(state.measure, state.values[None], state.time, dt, coeffs, model,
                   np.zeros(ev_t.size, np.int64), ev_t, ev_m)
    return LiftState(out[0], state.measure, state.time + dt)


@dataclass
class LiftTrajectory:
    grid: np.ndarray
    states: np.ndarray      # (M + 1, N, d)
    measure: BernsteinMeasure
    projected: np.ndarray = field(init=False)

    def __post_init__(self):
        self.projected = _project(self.measure, self.states)

    def state(self, k: int) -> LiftState:
        return LiftState(self.states[k], self.measure, float(self.grid[k]))

    @property
    def u(self) -> np.ndarray:
        return self.projected

    def to_csv(self) -> str:
        return trajectory_csv(self.grid, self.projected)

    def atoms_csv(self) -> str:
        buf = io.StringIO()
        d = self.states.shape[2]
        buf.write("t,atom_j," + ",".join(f"Y_j{c + 1}" for c in range(d)) + "\n")
        for t, Yk in zip(self.grid, self.states):
            for j, row in enumerate(Yk):
                buf.write(f"{t!r},{j}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def trajectory_csv(grid: np.ndarray, u: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("t," + ",".join(f"u_{c + 1}" for c in range(u.shape[1])) + "\n")
    for t, row in zip(grid, u):
        buf.write(repr(float(t)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def simulate_lift(m: BernsteinMeasure, coeffs: CoefficientSet, model: LevyModel, path: JumpPath,
                  grid, y0) -> LiftTrajectory:
    grid = _check_grid(grid, path.horizon)
    Y = _initial_field(m, y0)[None]
    cells = _event_cells(grid, path.times)
    states = np.empty((grid.size,) + Y.shape[1:])
    states[0] = Y[0]
    lo = 0
    for k in range(grid.size - 1):
        hi = lo + int(np.searchsorted(cells[lo:], k, side="right"))
        Y = _advance(m, Y, grid[k], grid[k + 1] - grid[k], coeffs, model,
                     np.zeros(hi - lo, np.int64), path.times[lo:hi], path.marks[lo:hi])
        states[k + 1] = Y[0]
        lo = hi
    return LiftTrajectory(grid, states, m)


class PicardDivergence(RuntimeError):
    def __init__(self, gaps: list[float]):
        super().__init__(f"Picard iteration did not converge; gap history {gaps}")
        self.gaps = gaps


@dataclass
class PicardResult:
    trajectory: LiftTrajectory
    iterations: int
    gaps: list[float]
    weighted_gaps: list[float]
    beta: float


def picard_solve(m: BernsteinMeasure, coeffs: CoefficientSet, model: LevyModel, path: JumpPath,
                 grid, y0, max_iter: int = 60, tol: float = 1e-12, beta: float | None = None) -> PicardResult:
    """Fixed-point iteration of the mild lift equation on one realized path.

    Each sweep rebuilds the whole trajectory from the previous iterate's
    projections with left-point quadrature of the convolution integrals.
    Stops when the sup over the grid of the V-norm change drops below ``tol``.
    ``weighted_gaps`` are the same changes in the ``sup_t exp(-beta t)`` norm.
    """
    grid = _check_grid(grid, path.horizon)
    y = _initial_field(m, y0)
    if beta is None:
        beta = 2.0 * (1.0 + model.total_rate)
    decay_all = np.exp(-np.multiply.outer(grid, m.rates))        # (M+1, N)
    base = decay_all[:, :, None] * y[None]
    cells = _event_cells(grid, path.times)
    dts = np.diff(grid)
    step_decay = np.exp(-np.multiply.outer(dts, m.rates))         # (M, N)
    ev_decay = np.exp(-np.multiply.outer(grid[cells + 1] - path.times, m.rates))
    xis = model.marks[path.marks]

    Y = base.copy()
    gaps: list[float] = []
    wgaps: list[float] = []
    for it in range(1, max_iter + 1):
        u = _project(m, Y)                                          # (M+1, d)
        t_col = grid[:, None]
        g = np.broadcast_to(coeffs.f(t_col, u), u.shape) - _compensator(coeffs, model, t_col, u)
        if path.times.size:
            sig = np.broadcast_to(coeffs.sigma(path.times[:, None], xis, u[cells]), (path.times.size, u.shape[1]))
        new = np.empty_like(Y)
        acc = np.zeros(Y.shape[1:])
        new[0] = base[0]
        e = 0
        for k in range(grid.size - 1):
            acc = step_decay[k][:, None] * (acc + dts[k] * g[k][None, :])
            while e < cells.size and cells[e] == k:
                acc = acc + ev_decay[e][:, None] * sig[e][None, :]
                e += 1
            new[k + 1] = base[k + 1] + acc
        diff = _sq_norm(m, new - Y, v=True)
        gaps.append(float(np.sqrt(diff.max())))
        wgaps.append(float(np.sqrt((np.exp(-beta * grid) * diff).max())))
        Y = new
        if gaps[-1] < tol:
            return PicardResult(LiftTrajectory(grid, Y, m), it, gaps, wgaps, beta)
    raise PicardDivergence(gaps)
