"""Direct convolution-quadrature solver for the stochastic Volterra equation.

Works on the original equation in ``R^d`` and never touches the lift, so it
serves as an independent check of the lifted solver on a shared jump path.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .levy import JumpPath, LevyModel
from .lift import CoefficientSet, trajectory_csv

logger = logging.getLogger(__name__)


@dataclass
class VolterraTrajectory:
    grid: np.ndarray
    u: np.ndarray        # (M + 1, d)
    forcing: np.ndarray  # (M + 1, d)

    def to_csv(self) -> str:
        return trajectory_csv(self.grid, self.u)


def simulate_volterra(kernel: Callable, coeffs: CoefficientSet, model: LevyModel, path: JumpPath,
                      grid, forcing: Callable) -> VolterraTrajectory:
    """Explicit left-point scheme on a uniform grid.

    ``u_k = x(t_k) + dt * sum_{m<k} k(t_k - t_m) [f_m - sum_i lambda_i sigma_{m,i}]
            + sum_{events s <= t_k} k(t_k - s) sigma(s, xi, u_m(s))``

    where ``m(s)`` is the grid index with ``s in (t_m, t_{m+1}]``.  The kernel
    is only evaluated at lags ``>= dt`` except for an event sitting exactly on
    a grid node, where the lag-0 value is replaced by ``k(dt / 2)`` if ``k(0)``
    is not finite.
    """
    grid = np.asarray(grid, dtype=float)
    M = grid.size - 1
    if M < 1 or grid[0] != 0.0:
        raise ValueError("grid must start at 0 and contain at least one step")
    dt = grid[1] - grid[0]
    if not np.allclose(np.diff(grid), dt, rtol=1e-9, atol=0.0):
        raise ValueError("direct Volterra solver needs a uniform grid")
    if not math.isclose(grid[-1], path.horizon, rel_tol=1e-12):
        raise ValueError("grid and jump path horizons differ")

    x = np.atleast_2d(np.asarray([np.atleast_1d(forcing(t)) for t in grid], dtype=float))
    d = x.shape[1]
    lags = np.asarray(kernel(dt * np.arange(1, M + 1)), dtype=float)   # k(dt), ..., k(M dt)
    k0 = float(np.asarray(kernel(0.0)))
    if not math.isfinite(k0):
        k0 = None

    u = np.empty((M + 1, d))
    g = np.empty((M, d))
    u[0] = x[0]
    cells = np.searchsorted(grid, path.times, side="left") - 1
    ev_sigma = np.zeros((path.times.size, d))
    xis = model.marks[path.marks]
    e_ready = 0
    for k in range(1, M + 1):
        m = k - 1
        um = u[m]
        comp = np.zeros(d)
        for xi, lam in zip(model.marks, model.rates):
            comp += lam * np.broadcast_to(coeffs.sigma(grid[m], xi, um), (d,))
        g[m] = np.broadcast_to(coeffs.f(grid[m], um), (d,)) - comp
        while e_ready < cells.size and cells[e_ready] == m:
            ev_sigma[e_ready] = np.broadcast_to(coeffs.sigma(path.times[e_ready], xis[e_ready], um), (d,))
            e_ready += 1
        drift = dt * (lags[k - 1::-1] @ g[:k])
        jumps = np.zeros(d)
        if e_ready:
            lag = grid[k] - path.times[:e_ready]
            kv = np.empty(e_ready)
            pos = lag > 0
            kv[pos] = kernel(lag[pos])
            if not np.all(pos):
                if k0 is None:
                    logger.info("event on grid node t=%r: using k(dt/2) for the lag-0 kernel value", grid[k])
                    kv[~pos] = float(kernel(dt / 2.0))
                else:
                    kv[~pos] = k0
            jumps = kv @ ev_sigma[:e_ready]
        u[k] = x[k] + drift + jumps
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite Volterra solution")
    return VolterraTrajectory(grid, u, x)


@dataclass
class ComparisonReport:
    sup_gap: float
    rmse: float
    per_component: np.ndarray

    def to_dict(self) -> dict:
        return {
            "sup_gap": self.sup_gap,
            "rmse": self.rmse,
            "per_component": [float(v) for v in self.per_component],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _values(traj) -> tuple[np.ndarray, np.ndarray]:
    u = traj.projected if hasattr(traj, "projected") else traj.u
    return np.asarray(traj.grid, dtype=float), np.asarray(u, dtype=float)


def compare_paths(a, b) -> ComparisonReport:
    """Gap between two trajectories (lift or direct) sampled on the same grid."""
    ga, ua = _values(a)
    gb, ub = _values(b)
    if ga.shape != gb.shape or not np.array_equal(ga, gb):
        raise ValueError("trajectories live on different grids")
    diff = np.abs(ua - ub)
    return ComparisonReport(float(diff.max()), float(np.sqrt(np.mean(diff**2))), diff.max(axis=0))
