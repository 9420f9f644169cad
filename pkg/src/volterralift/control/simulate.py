"""Ensemble simulation of the controlled lift.

Two samplers share one stepper:

* ``controlled``: events drawn directly under the tilted law by thinning a
  dominating process with rates ``C_r * lambda_i``;
* ``base``: events drawn under the reference law, with the density of the
  tilted law accumulated along each path for reweighting.

Under the tilted law the drift gains ``sum_i sigma (r_i - 1) lambda_i`` while
the compensator becomes ``r_i lambda_i``; the two combine into the base
compensator, so the stepper is the uncontrolled one fed with accepted events.

Actions and intensities are frozen at the left end of each grid cell, so the
per-cell intensity is predictable and the thinning and reweighting routes
target exactly the same discrete law.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..levy import (
    STREAM_BASE,
    STREAM_PROPOSAL,
    GirsanovWeight,
    JumpEnsemble,
    JumpPath,
    sample_ensemble,
)
from ..lift import LiftTrajectory, _advance, _project
from .problem import ControlProblem, Policy

DEFAULT_CHUNK = 20_000


@dataclass
class Ensemble:
    grid: np.ndarray
    u: np.ndarray            # (M + 1, P, d)
    states: np.ndarray | None  # (M + 1, P, N, d) when kept
    actions: np.ndarray      # (M, P)
    counts: np.ndarray       # (M, P, n_marks) accepted events per cell
    log_weight: np.ndarray   # (P,) log of dP^gamma / dP along the path
    log_events: np.ndarray   # (P,) sum of log r over accepted events
    running: np.ndarray      # (P,) left-point quadrature of the running cost
    terminal: np.ndarray     # (P,)
    events: JumpEnsemble     # accepted events

    @property
    def cost(self) -> np.ndarray:
        return self.running + self.terminal

    @property
    def n_paths(self) -> int:
        return self.u.shape[1]


def _simulate_chunk(problem: ControlProblem, policy: Policy, n_paths: int, seed: int,
                    first_path: int, measure: str, keep_states: bool) -> Ensemble:
    m, grid, lev = problem.measure, problem.grid, problem.levy
    M = grid.size - 1
    T = problem.T
    if measure == "controlled":
        ens = sample_ensemble(lev.scaled(problem.bound), T, n_paths, seed,
                              tag=STREAM_PROPOSAL, with_uniforms=True, first_path=first_path)
    elif measure == "base":
        ens = sample_ensemble(lev, T, n_paths, seed, tag=STREAM_BASE, first_path=first_path)
    else:
        raise ValueError(f"unknown measure {measure!r}")

    cells = np.searchsorted(grid, ens.times, side="left") - 1
    order = np.argsort(cells, kind="stable")
    cells = cells[order]
    ev_path, ev_time, ev_mark = ens.path[order], ens.times[order], ens.marks[order]
    ev_unif = ens.uniforms[order] if ens.uniforms is not None else None
    bounds = np.searchsorted(cells, np.arange(M + 1), side="left")

    d, N = problem.dim, m.n_atoms
    Y = np.broadcast_to(problem.y0, (n_paths, N, d)).copy()
    u_all = np.empty((M + 1, n_paths, d))
    states = np.empty((M + 1, n_paths, N, d)) if keep_states else None
    actions = np.empty((M, n_paths), dtype=np.int64)
    counts = np.zeros((M, n_paths, lev.n_marks), dtype=np.int32)
    log_events = np.zeros(n_paths)
    compensator = np.zeros(n_paths)
    running = np.zeros(n_paths)
    kept = np.zeros(ev_time.size, dtype=bool)
    lam = lev.rates

    for k in range(M):
        t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
        u = _project(m, Y)
        u_all[k] = u
        if keep_states:
            states[k] = Y
        a = policy.act(k, t, Y, u)
        actions[k] = a
        R = problem.rates_matrix(t, u, a)
        running += dt * np.broadcast_to(problem.running_cost(t, u, a), (n_paths,))
        compensator += dt * ((R - 1.0) @ lam)

        lo, hi = bounds[k], bounds[k + 1]
        rows, times, marks = ev_path[lo:hi], ev_time[lo:hi], ev_mark[lo:hi]
        r_ev = R[rows, marks]
        if ev_unif is not None:
            acc = ev_unif[lo:hi] * problem.bound < r_ev
            rows, times, marks, r_ev = rows[acc], times[acc], marks[acc], r_ev[acc]
            kept[lo:hi] = acc
        else:
            kept[lo:hi] = True
        np.add.at(log_events, rows, np.log(r_ev))
        np.add.at(counts[k], (rows, marks), 1)
        Y = _advance(m, Y, t, dt, problem.coeffs, lev, rows, times, marks)

    u_all[M] = _project(m, Y)
    if keep_states:
        states[M] = Y
    terminal = np.broadcast_to(problem.terminal_cost(u_all[M]), (n_paths,)).astype(float)

    back = np.argsort(order, kind="stable")  # restore (path, time) order
    keep_sorted = kept[back]
    accepted = JumpEnsemble(n_paths, T, ens.path[keep_sorted], ens.times[keep_sorted],
                            ens.marks[keep_sorted])
    return Ensemble(grid, u_all, states, actions, counts, log_events - compensator, log_events,
                    running, terminal, accepted)


def simulate_ensemble(problem: ControlProblem, policy: Policy, n_paths: int, seed: int, *,
                      measure: str = "controlled", keep_states: bool = False,
                      chunk: int = DEFAULT_CHUNK) -> Ensemble:
    """Simulate ``n_paths`` controlled lifts; path ``p`` always uses substream ``p``.

    Chunking bounds memory only; the result does not depend on ``chunk``.
    """
    parts = [
        _simulate_chunk(problem, policy, min(chunk, n_paths - s), seed, s, measure, keep_states)
        for s in range(0, n_paths, chunk)
    ]
    if len(parts) == 1:
        return parts[0]
    offsets = np.cumsum([0] + [p.n_paths for p in parts[:-1]])
    events = JumpEnsemble(
        n_paths, problem.T,
        np.concatenate([p.events.path + o for p, o in zip(parts, offsets)]),
        np.concatenate([p.events.times for p in parts]),
        np.concatenate([p.events.marks for p in parts]),
    )
    return Ensemble(
        problem.grid,
        np.concatenate([p.u for p in parts], axis=1),
        np.concatenate([p.states for p in parts], axis=1) if keep_states else None,
        np.concatenate([p.actions for p in parts], axis=1),
        np.concatenate([p.counts for p in parts], axis=1),
        np.concatenate([p.log_weight for p in parts]),
        np.concatenate([p.log_events for p in parts]),
        np.concatenate([p.running for p in parts]),
        np.concatenate([p.terminal for p in parts]),
        events,
    )


@dataclass
class ControlledPath:
    trajectory: LiftTrajectory
    path: JumpPath
    weight: GirsanovWeight
    actions: np.ndarray

    def __iter__(self):
        return iter((self.trajectory, self.path, self.weight))


def controlled_simulate(problem: ControlProblem, policy: Policy, seed: int,
                        path_index: int = 0) -> ControlledPath:
    """One path of the controlled lift under the tilted law.

    Unpacks as ``(trajectory, jump_path, girsanov_weight)``; the realized
    action per grid cell is in ``.actions``.
    """
    ens = _simulate_chunk(problem, policy, 1, seed, path_index, "controlled", keep_states=True)
    traj = LiftTrajectory(problem.grid, ens.states[:, 0], problem.measure)
    jp = JumpPath(ens.events.times, ens.events.marks, problem.T)
    comp = ens.log_events[0] - ens.log_weight[0]
    terms = _event_log_terms(problem, ens, jp)
    return ControlledPath(traj, jp, GirsanovWeight(terms, float(comp)), ens.actions[:, 0])


def _event_log_terms(problem: ControlProblem, ens: Ensemble, jp: JumpPath) -> np.ndarray:
    cells = np.searchsorted(problem.grid, jp.times, side="left") - 1
    out = np.empty(len(jp))
    for e, (k, i) in enumerate(zip(cells, jp.marks)):
        a = ens.actions[k, :1]
        R = problem.rates_matrix(float(problem.grid[k]), ens.u[k, :1], a)
        out[e] = math.log(R[0, i])
    return out


def closed_loop_simulate(problem: ControlProblem, feedback: Policy, seed: int,
                         path_index: int = 0) -> ControlledPath:
    """Controlled simulation under a feedback map evaluated on the pre-jump state."""
    if feedback.kind not in ("feedback", "constant"):
        raise ValueError("closed-loop simulation needs a feedback policy")
    return controlled_simulate(problem, feedback, seed, path_index)


def cost_evaluate(problem: ControlProblem, policy: Policy, n_paths: int, seed: int,
                  chunk: int = DEFAULT_CHUNK) -> tuple[float, float]:
    """Monte Carlo cost under the tilted law: ``(mean, standard error)``."""
    if n_paths < 2:
        raise ValueError("cost estimation needs at least two paths")
    ens = simulate_ensemble(problem, policy, n_paths, seed, measure="controlled", chunk=chunk)
    c = ens.cost
    return float(c.mean()), float(c.std(ddof=1) / math.sqrt(n_paths))


def reweighted_cost(problem: ControlProblem, policy: Policy, n_paths: int, seed: int,
                    chunk: int = DEFAULT_CHUNK) -> tuple[float, float]:
    """Cost of ``policy`` estimated from reference-law paths weighted by the density."""
    if n_paths < 2:
        raise ValueError("cost estimation needs at least two paths")
    ens = simulate_ensemble(problem, policy, n_paths, seed, measure="base", chunk=chunk)
    c = np.exp(ens.log_weight) * ens.cost
    return float(c.mean()), float(c.std(ddof=1) / math.sqrt(n_paths))
