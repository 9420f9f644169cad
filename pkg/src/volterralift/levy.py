"""Finite-activity marked Poisson noise.

The Lévy measure is ``nu = sum_i lambda_i delta_{xi_i}``.  Every simulated
path draws from its own counter-based Philox stream keyed by
``(seed, path index)``, so an ensemble reproduces bit for bit however it is
chunked or ordered.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# distinct key spaces for the different random ingredients of a run
STREAM_BASE = 0
STREAM_PROPOSAL = 1
STREAM_SCHEDULE = 2


class IntensityBoundError(RuntimeError):
    """The controlled intensity left ``(0, C_r]``."""


def substream(seed: int, index: int, tag: int = STREAM_BASE) -> np.random.Generator:
    """Independent generator for path ``index`` of the run seeded with ``seed``."""
    if seed < 0 or index < 0 or not 0 <= tag < 2**15:
        raise ValueError("seed, index and tag must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[int(seed), (int(tag) << 48) | int(index)]))


@dataclass(frozen=True)
class LevyModel:
    marks: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        marks = np.array(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        rates = np.array(self.rates, dtype=float).reshape(-1)
        if marks.shape[0] == 0 or marks.shape[0] != rates.size:
            raise ValueError("need one rate per mark and at least one mark")
        if np.any(np.all(marks == 0, axis=1)):
            raise ValueError("marks must be nonzero vectors")
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
            raise ValueError("mark rates must be finite and strictly positive")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "rates", rates)

    @property
    def n_marks(self) -> int:
        return self.rates.size

    @property
    def dim(self) -> int:
        return self.marks.shape[1]

    @property
    def total_rate(self) -> float:
        return float(self.rates.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.rates / self.rates.sum()

    def scaled(self, factor: float) -> "LevyModel":
        return LevyModel(self.marks, self.rates * factor)


@dataclass(frozen=True)
class JumpPath:
    times: np.ndarray
    marks: np.ndarray
    horizon: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if times.shape != marks.shape:
            raise ValueError("one mark index per event")
        if times.size:
            if times[0] <= 0 or times[-1] > self.horizon:
                raise ValueError("event times must lie in (0, T]")
            if np.any(np.diff(times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if marks.min() < 0:
                raise ValueError("negative mark index")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)

    def __len__(self) -> int:
        return self.times.size

    def before(self, t: float) -> "JumpPath":
        """Events strictly before ``t``."""
        n = int(np.searchsorted(self.times, t, side="left"))
        return JumpPath(self.times[:n], self.marks[:n], self.horizon)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,mark_index\n")
        for t, i in zip(self.times, self.marks):
            buf.write(f"{float(t)!r},{int(i)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, horizon: float) -> "JumpPath":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:] if ln.strip()]
        return cls(np.array([float(r[0]) for r in rows]), np.array([int(r[1]) for r in rows]), horizon)


def _draw_events(total_rate: float, probs: np.ndarray, T: float, rng: np.random.Generator):
    n = rng.poisson(total_rate * T)
    times = np.sort(rng.uniform(0.0, T, size=n))
    if probs.size > 1:
        cdf = np.cumsum(probs)
        marks = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), probs.size - 1)
    else:
        marks = np.zeros(n, np.int64)
    # uniform(0, T) may return exactly 0 with probability ~2**-53
    times = np.where(times > 0, times, np.nextafter(0.0, 1.0))
    return times, marks


def sample_path(model: LevyModel, T: float, rng: np.random.Generator) -> JumpPath:
    if T <= 0:
        raise ValueError("horizon must be positive")
    times, marks = _draw_events(model.total_rate, model.probabilities, T, rng)
    return JumpPath(times, marks, T)


@dataclass
class JumpEnsemble:
    """Flattened events of many paths, sorted by (path, time).

    ``uniforms`` is only present for proposal ensembles used by thinning.
    """

    n_paths: int
    horizon: float
    path: np.ndarray
    times: np.ndarray
    marks: np.ndarray
    uniforms: np.ndarray | None = None

    def path_at(self, p: int) -> JumpPath:
        sel = self.path == p
        return JumpPath(self.times[sel], self.marks[sel], self.horizon)

    def counts(self) -> np.ndarray:
        return np.bincount(self.path, minlength=self.n_paths)


def sample_ensemble(model: LevyModel, T: float, n_paths: int, seed: int, *,
                    tag: int = STREAM_BASE, with_uniforms: bool = False,
                    first_path: int = 0) -> JumpEnsemble:
    """Sample ``n_paths`` independent paths, path ``p`` from ``substream(seed, first_path + p)``."""
    probs = model.probabilities
    ps, ts, ms, us = [], [], [], []
    for p in range(n_paths):
        rng = substream(seed, first_path + p, tag)
        times, marks = _draw_events(model.total_rate, probs, T, rng)
        ps.append(np.full(times.size, p, dtype=np.int64))
        ts.append(times)
        ms.append(marks)
        if with_uniforms:
            us.append(rng.random(times.size))
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    return JumpEnsemble(
        n_paths, T, cat(ps, np.int64), cat(ts, float), cat(ms, np.int64),
        cat(us, float) if with_uniforms else None,
    )


# intensity(t, state, mark_index, action) -> r ;  driver(t, history) -> (state, action)
Intensity = Callable[[float, object, int, object], float]
Driver = Callable[[float, JumpPath], tuple]


def _check_rate(r: float, bound: float, t: float, mark: int, action) -> float:
    if not (r > 0) or r > bound:
        raise IntensityBoundError(
            f"intensity r={r!r} outside (0, C_r={bound}] at t={t!r}, mark={mark}, action={action!r}"
        )
    return r


def thinning_sample(model: LevyModel, intensity: Intensity, bound: float, T: float,
                    rng: np.random.Generator, driver: Driver | None = None) -> JumpPath:
    """Sample events with per-mark rate ``r * lambda_i`` by thinning.

    Proposals come from the dominating process with rates ``bound * lambda_i``
    and are kept with probability ``r / bound``; ``r`` sees the state supplied
    by ``driver`` from the events accepted strictly before the proposal.
    """
    if bound <= 0:
        raise ValueError("intensity bound C_r must be positive")
    times, marks = _draw_events(model.total_rate * bound, model.probabilities, T, rng)
    u = rng.random(times.size)
    kept_t: list[float] = []
    kept_m: list[int] = []
    state = action = None
    for t, i, ui in zip(times, marks, u):
        if driver is not None:
            state, action = driver(t, JumpPath(np.array(kept_t), np.array(kept_m, np.int64), T))
        r = _check_rate(float(intensity(t, state, int(i), action)), bound, t, int(i), action)
        if ui * bound < r:
            kept_t.append(t)
            kept_m.append(int(i))
    return JumpPath(np.array(kept_t), np.array(kept_m, np.int64), T)


@dataclass(frozen=True)
class GirsanovWeight:
    """``log_weight = sum(event_terms) - compensator``."""

    event_terms: np.ndarray
    compensator: float
    log_weight: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "log_weight", float(np.sum(self.event_terms) - self.compensator))

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def girsanov_weight(path: JumpPath, intensity: Intensity, model: LevyModel, T: float | None = None,
                    driver: Driver | None = None, n_quad: int = 1) -> GirsanovWeight:
    """Density of the tilted law against the base law on ``[0, T]``.

    The compensator ``int_0^T sum_i (r_i(s) - 1) lambda_i ds`` is integrated
    piecewise between event times (the state only changes at events), with
    each piece split into ``n_quad`` left-point cells for time-varying ``r``.
    Exact whenever ``r`` is constant in time between events.
    """
    T = path.horizon if T is None else T
    terms = np.empty(len(path))
    state = action = None
    for k, (t, i) in enumerate(zip(path.times, path.marks)):
        if driver is not None:
            state, action = driver(t, path.before(t))
        r = float(intensity(t, state, int(i), action))
        if not r > 0:
            raise IntensityBoundError(f"nonpositive intensity r={r!r} at event t={t!r}, mark={int(i)}")
        terms[k] = math.log(r)

    knots = np.concatenate(([0.0], path.times[path.times < T], [T]))
    comp = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        if b <= a:
            continue
        if driver is not None:
            history = JumpPath(path.times[path.times <= a], path.marks[path.times <= a], path.horizon)
        h = (b - a) / n_quad
        for q in range(n_quad):
            s = a + q * h
            if driver is not None:
                state, action = driver(s, history)
            excess = sum((float(intensity(s, state, i, action)) - 1.0) * lam
                         for i, lam in enumerate(model.rates))
            comp += excess * h
    return GirsanovWeight(terms, comp)
