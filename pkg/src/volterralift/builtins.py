"""Named coefficient families for config-driven runs.

Each family is built from a parameter table and a context (state dimension
``d``, the Lévy marks and the number of actions).  Builders return the
vectorized callables expected by the lift and control modules together with a
Lipschitz constant where one is known.

Families
--------
f      zero, constant, linear, affine, growth
sigma  zero, constant, mark_linear, mark_multiplicative, directional
r      table, table_tanh
l      table, table_quadratic
g      constant, linear, quadratic
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class BuiltinError(ValueError):
    """Bad family parameters; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class Context:
    d: int
    marks: np.ndarray      # (n_marks, n)
    n_actions: int = 1


@dataclass
class Built:
    fn: Callable
    lipschitz: float
    params: dict           # resolved parameters, defaults included
    bound: float = math.inf  # sup of the function where meaningful (intensities)


def _vector(params: dict, key: str, d: int, default=None) -> np.ndarray:
    if key not in params:
        if default is None:
            raise BuiltinError(key, f"missing parameter {key!r}")
        return np.full(d, float(default))
    v = np.atleast_1d(np.asarray(params[key], dtype=float))
    if v.size == 1:
        v = np.full(d, float(v[0]))
    if v.shape != (d,):
        raise BuiltinError(key, f"{key!r} needs {d} entries")
    return v


def _matrix(params: dict, key: str, rows: int, cols: int, default=None) -> np.ndarray:
    if key not in params:
        if default is None:
            raise BuiltinError(key, f"missing parameter {key!r}")
        return default * np.eye(rows, cols)
    v = np.asarray(params[key], dtype=float)
    if v.ndim == 0:
        return float(v) * np.eye(rows, cols)
    if v.ndim == 1 and rows == cols and v.size == rows:
        return np.diag(v)
    if v.shape != (rows, cols):
        raise BuiltinError(key, f"{key!r} needs shape ({rows}, {cols})")
    return v


def _scalar(params: dict, key: str, default=None) -> float:
    if key not in params:
        if default is None:
            raise BuiltinError(key, f"missing parameter {key!r}")
        return float(default)
    v = params[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise BuiltinError(key, f"{key!r} must be a number")
    return float(v)


def _norm2(A: np.ndarray) -> float:
    return float(np.linalg.norm(A, 2)) if A.size else 0.0


# --- drift f(t, u) ---------------------------------------------------------------

def _f_zero(p, ctx):
    return Built(lambda t, u: np.zeros_like(u), 0.0, {})


def _f_constant(p, ctx):
    b = _vector(p, "value", ctx.d)
    return Built(lambda t, u: np.broadcast_to(b, u.shape), 0.0, {"value": b.tolist()})


def _f_linear(p, ctx):
    A = _matrix(p, "a", ctx.d, ctx.d)
    return Built(lambda t, u: u @ A.T, _norm2(A), {"a": A.tolist()})


def _f_affine(p, ctx):
    A = _matrix(p, "a", ctx.d, ctx.d)
    b = _vector(p, "b", ctx.d)
    return Built(lambda t, u: u @ A.T + b, _norm2(A), {"a": A.tolist(), "b": b.tolist()})


def _f_growth(p, ctx):
    # per-direction growth mu_i, saturating linearly at capacity K_i (default none)
    mu = _vector(p, "mu", ctx.d)
    raw = p.get("capacity")
    if isinstance(raw, list):
        raw = [math.inf if c is None else c for c in raw]
    cap = _vector({"capacity": raw} if raw is not None else {}, "capacity", ctx.d, default=math.inf)
    if np.any(cap <= 0):
        raise BuiltinError("capacity", "capacities must be positive")
    inv = 1.0 / cap

    def f(t, u):
        return mu * (1.0 - np.clip(u * inv, 0.0, 1.0))

    lip = float(np.max(np.abs(mu) * inv))
    return Built(f, lip, {"mu": mu.tolist(), "capacity": [float(c) if math.isfinite(c) else None for c in cap]})


# --- jump coefficient sigma(t, xi, u) --------------------------------------------

def _sigma_zero(p, ctx):
    return Built(lambda t, xi, u: np.zeros_like(u), 0.0, {})


def _sigma_constant(p, ctx):
    b = _vector(p, "value", ctx.d)
    return Built(lambda t, xi, u: np.broadcast_to(b, u.shape), 0.0, {"value": b.tolist()})


def _sigma_mark_linear(p, ctx):
    n = ctx.marks.shape[1]
    G = _matrix(p, "scale", ctx.d, n) if "scale" in p else _matrix(p, "matrix", ctx.d, n)
    return Built(lambda t, xi, u: np.broadcast_to(xi @ G.T, u.shape), 0.0, {"matrix": G.tolist()})


def _sigma_mark_multiplicative(p, ctx):
    if ctx.marks.shape[1] != ctx.d:
        raise BuiltinError("family", "mark_multiplicative needs marks of dimension d")
    s = _scalar(p, "scale")
    lip = abs(s) * float(np.max(np.abs(ctx.marks)))
    return Built(lambda t, xi, u: s * xi * u, lip, {"scale": s})


def _sigma_directional(p, ctx):
    # directions e_i at angles 2 pi i / d; an event with unit mark xi adds
    # scale * max(0, <xi, e_i>) to direction i
    if ctx.marks.shape[1] != 2:
        raise BuiltinError("family", "directional needs two-dimensional marks")
    s = _scalar(p, "scale")
    ang = 2.0 * np.pi * np.arange(ctx.d) / ctx.d
    E = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sigma(t, xi, u):
        return np.broadcast_to(s * np.maximum(xi @ E.T, 0.0), u.shape)

    return Built(sigma, 0.0, {"scale": s})


# --- intensity r(t, u, i, a) -----------------------------------------------------

def _rate_table(p, ctx, key="table") -> np.ndarray:
    if key not in p:
        raise BuiltinError(key, f"missing parameter {key!r}")
    R = np.asarray(p[key], dtype=float)
    n_marks = ctx.marks.shape[0]
    if R.ndim == 1:
        R = np.repeat(R[:, None], n_marks, axis=1)
    if R.shape != (ctx.n_actions, n_marks):
        raise BuiltinError(key, f"{key!r} needs one row per action and one column per mark")
    if np.any(R <= 0):
        raise BuiltinError(key, "intensities must be positive")
    return R


def _r_table(p, ctx):
    R = _rate_table(p, ctx)
    return Built(lambda t, u, i, a: R[a, i], 0.0, {"table": R.tolist()}, bound=float(R.max()))


def _r_table_tanh(p, ctx):
    # r = table[a, i] * (1 + s * tanh(kappa * u[component]))
    R = _rate_table(p, ctx)
    s = _scalar(p, "strength")
    kappa = _scalar(p, "kappa", 1.0)
    comp = int(_scalar(p, "component", 0))
    if not 0 <= s < 1:
        raise BuiltinError("strength", "strength must lie in [0, 1) to keep r positive")
    if not 0 <= comp < ctx.d:
        raise BuiltinError("component", "component out of range")

    def r(t, u, i, a):
        return R[a, i] * (1.0 + s * np.tanh(kappa * u[:, comp]))

    params = {"table": R.tolist(), "strength": s, "kappa": kappa, "component": comp}
    return Built(r, float(R.max() * s * abs(kappa)), params, bound=float(R.max() * (1.0 + s)))


# --- running cost l(t, u, a) -----------------------------------------------------

def _cost_vector(p, ctx) -> np.ndarray:
    if "costs" not in p:
        raise BuiltinError("costs", "missing parameter 'costs'")
    c = np.atleast_1d(np.asarray(p["costs"], dtype=float))
    if c.shape != (ctx.n_actions,):
        raise BuiltinError("costs", "'costs' needs one entry per action")
    return c


def _l_table(p, ctx):
    c = _cost_vector(p, ctx)
    return Built(lambda t, u, a: c[a], 0.0, {"costs": c.tolist()})


def _l_table_quadratic(p, ctx):
    c = _cost_vector(p, ctx)
    q = _scalar(p, "q")
    target = _vector(p, "target", ctx.d, default=0.0)
    return Built(lambda t, u, a: c[a] + q * np.sum((u - target) ** 2, axis=-1), math.inf,
                 {"costs": c.tolist(), "q": q, "target": target.tolist()})


# --- terminal cost g(u) ----------------------------------------------------------

def _g_constant(p, ctx):
    v = _scalar(p, "value")
    return Built(lambda u: np.full(u.shape[:-1], v), 0.0, {"value": v})


def _g_linear(p, ctx):
    w = _vector(p, "coef", ctx.d)
    b = _scalar(p, "offset", 0.0)
    return Built(lambda u: u @ w + b, float(np.linalg.norm(w)), {"coef": w.tolist(), "offset": b})


def _g_quadratic(p, ctx):
    q = _scalar(p, "q")
    target = _vector(p, "target", ctx.d, default=0.0)
    b = _scalar(p, "offset", 0.0)
    return Built(lambda u: q * np.sum((u - target) ** 2, axis=-1) + b, math.inf,
                 {"q": q, "target": target.tolist(), "offset": b})


FAMILIES: dict[str, dict[str, Callable]] = {
    "f": {"zero": _f_zero, "constant": _f_constant, "linear": _f_linear,
          "affine": _f_affine, "growth": _f_growth},
    "sigma": {"zero": _sigma_zero, "constant": _sigma_constant, "mark_linear": _sigma_mark_linear,
              "mark_multiplicative": _sigma_mark_multiplicative, "directional": _sigma_directional},
    "r": {"table": _r_table, "table_tanh": _r_table_tanh},
    "l": {"table": _l_table, "table_quadratic": _l_table_quadratic},
    "g": {"constant": _g_constant, "linear": _g_linear, "quadratic": _g_quadratic},
}


def build(role: str, params: dict, ctx: Context) -> Built:
    """Instantiate the family named by ``params['family']`` for ``role``."""
    if not isinstance(params, dict):
        raise BuiltinError("", "expected a table with a 'family' key")
    fam = params.get("family")
    if fam is None:
        raise BuiltinError("family", "missing parameter 'family'")
    table = FAMILIES[role]
    if fam not in table:
        raise BuiltinError("family", f"unknown {role} family {fam!r}; known: {', '.join(sorted(table))}")
    try:
        built = table[fam](params, ctx)
    except BuiltinError:
        raise
    except (TypeError, ValueError) as exc:
        raise BuiltinError("", f"bad parameters for {role} family {fam!r}: {exc}") from exc
    built.params = {"family": fam, **built.params}
    return built
