"""Experiment configuration: TOML document to validated run objects.

Sections: ``kernel``, ``levy``, ``coefficients``, ``initial``, ``control``,
``numerics`` and an optional top-level ``mode``.  Every key is checked; a
failure raises :class:`ConfigError` carrying the dotted path of the field.
All defaults are written back into :attr:`ExperimentConfig.resolved` so the
run manifest is complete.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .builtins import BuiltinError, Context, build
from .control import ControlProblem, FeatureMap
from .kernel import BernsteinMeasure, DensitySpec, KernelError, discretize_density, make_atomic
from .levy import LevyModel
from .lift import CoefficientSet

MODES = ("kernel-check", "equivalence", "solve", "evaluate", "closed-loop")
CONTROL_MODES = ("solve", "evaluate", "closed-loop")
KERNEL_FAMILIES = ("exponential-mix", "fractional", "gamma-mix")
FEATURE_KINDS = ("u", "lift", "u+lift")

_REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


class _Section:
    """Key access on one table with path-aware errors and leftover detection."""

    def __init__(self, doc, path: str):
        if not isinstance(doc, dict):
            raise ConfigError(path, "expected a table")
        self.doc, self.path, self.used = doc, path, set()

    def sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, default=_REQUIRED, kind=None):
        self.used.add(key)
        if key not in self.doc:
            if default is _REQUIRED:
                raise ConfigError(self.sub(key), "missing required field")
            return default
        v = self.doc[key]
        if kind == "number" and not _num(v):
            raise ConfigError(self.sub(key), "expected a number")
        if kind == "int" and (not isinstance(v, int) or isinstance(v, bool)):
            raise ConfigError(self.sub(key), "expected an integer")
        if kind == "str" and not isinstance(v, str):
            raise ConfigError(self.sub(key), "expected a string")
        if kind == "list" and not isinstance(v, list):
            raise ConfigError(self.sub(key), "expected an array")
        if kind == "table" and not isinstance(v, dict):
            raise ConfigError(self.sub(key), "expected a table")
        return v

    def finish(self) -> None:
        extra = sorted(set(self.doc) - self.used)
        if extra:
            raise ConfigError(self.sub(extra[0]), "unknown field")


def _positive(sec: _Section, key: str, default=_REQUIRED, kind="number"):
    v = sec.get(key, default, kind)
    if not v > 0:
        raise ConfigError(sec.sub(key), "must be positive")
    return v


@dataclass
class Numerics:
    T: float
    grid_steps: int
    n_paths: int
    seed: int
    regression_degree: int
    features: str
    regression_tol: float
    threshold: float
    n_schedules: int
    eval_paths: int
    chunk: int

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.grid_steps + 1)

    @property
    def feature_map(self) -> FeatureMap:
        return FeatureMap(self.features, self.regression_degree)


@dataclass
class ExperimentConfig:
    mode: str
    resolved: dict
    measure: BernsteinMeasure
    density: DensitySpec | None
    levy: LevyModel
    coeffs: CoefficientSet
    y0: np.ndarray
    numerics: Numerics
    problem: ControlProblem | None = None
    action_names: tuple = ()

    @property
    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON form of the resolved configuration."""
        text = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _kernel(doc) -> tuple[BernsteinMeasure, DensitySpec | None, dict]:
    sec = _Section(doc, "kernel")
    family = sec.get("family", "exponential-mix", "str")
    if family not in KERNEL_FAMILIES:
        raise ConfigError("kernel.family", f"unknown family {family!r}; known: {', '.join(KERNEL_FAMILIES)}")
    eps = sec.get("eps", None)
    if eps is not None and not (_num(eps) and eps > 0):
        raise ConfigError("kernel.eps", "must be a positive number")
    out = {"family": family}
    try:
        if family == "exponential-mix":
            atoms = sec.get("atoms", kind="list")
            pairs = []
            for j, a in enumerate(atoms):
                if not (isinstance(a, list) and len(a) == 2 and all(_num(v) for v in a)):
                    raise ConfigError(f"kernel.atoms[{j}]", "expected [rate, weight]")
                pairs.append((float(a[0]), float(a[1])))
            eps = 0.25 if eps is None else float(eps)
            m = make_atomic(pairs, eps=eps)
            spec = None
            out.update(atoms=[list(p) for p in pairs], eps=eps)
        else:
            alpha = sec.get("alpha", None if family == "gamma-mix" else _REQUIRED, "number")
            comps = ()
            if family == "gamma-mix":
                raw = sec.get("components", kind="list")
                for j, c in enumerate(raw):
                    if not (isinstance(c, list) and len(c) == 3 and all(_num(v) for v in c)):
                        raise ConfigError(f"kernel.components[{j}]", "expected [c, shape, rate]")
                comps = tuple(tuple(float(v) for v in c) for c in raw)
            spec = DensitySpec(
                family, alpha=None if alpha is None else float(alpha), components=comps,
                x_min=float(_positive(sec, "x_min", 1e-2)), x_max=float(_positive(sec, "x_max", 1e4)),
                nodes=int(_positive(sec, "nodes", 60, "int")), eps=None if eps is None else float(eps),
            )
            m = discretize_density(spec)
            out.update(x_min=spec.x_min, x_max=spec.x_max, nodes=spec.nodes, eps=m.eps)
            if alpha is not None:
                out["alpha"] = float(alpha)
            if comps:
                out["components"] = [list(c) for c in comps]
    except KernelError as exc:
        field = "kernel.alpha" if "alpha" in str(exc) else "kernel"
        raise ConfigError(field, str(exc)) from exc
    out["check_t_min"] = float(_positive(sec, "check_t_min", 0.05))
    out["check_t_max"] = float(_positive(sec, "check_t_max", 5.0))
    if out["check_t_min"] >= out["check_t_max"]:
        raise ConfigError("kernel.check_t_max", "must exceed check_t_min")
    sec.finish()
    return m, spec, out


def _levy(doc) -> tuple[LevyModel, dict]:
    sec = _Section(doc, "levy")
    marks = sec.get("marks", kind="list")
    rates = sec.get("rates", kind="list")
    rows = []
    for j, mk in enumerate(marks):
        row = mk if isinstance(mk, list) else [mk]
        if not row or not all(_num(v) for v in row):
            raise ConfigError(f"levy.marks[{j}]", "expected a number or an array of numbers")
        rows.append([float(v) for v in row])
    if len({len(r) for r in rows}) > 1:
        raise ConfigError("levy.marks", "marks must share one dimension")
    for j, r in enumerate(rates):
        if not _num(r) or not r > 0:
            raise ConfigError(f"levy.rates[{j}]", "rates must be positive numbers")
    if len(rates) != len(rows):
        raise ConfigError("levy.rates", "need one rate per mark")
    sec.finish()
    model = LevyModel(np.array(rows), np.array(rates, dtype=float))
    return model, {"marks": rows, "rates": [float(r) for r in rates]}


def _family(sec: _Section, key: str, role: str, ctx: Context):
    params = sec.get(key, kind="table")
    try:
        return build(role, params, ctx)
    except BuiltinError as exc:
        raise ConfigError(f"{sec.sub(key)}.{exc.field}" if exc.field else sec.sub(key), str(exc)) from exc


def _numerics(doc, mode: str) -> tuple[Numerics, dict]:
    sec = _Section(doc, "numerics")
    n_paths = int(_positive(sec, "n_paths", 20 if mode == "equivalence" else 10_000, "int"))
    num = Numerics(
        T=float(_positive(sec, "T", 1.0)),
        grid_steps=int(_positive(sec, "grid_steps", 1000 if mode == "equivalence" else 50, "int")),
        n_paths=n_paths,
        seed=sec.get("seed", kind="int"),
        regression_degree=int(_positive(sec, "regression_degree", 3, "int")),
        features=sec.get("features", "u", "str"),
        regression_tol=float(_positive(sec, "regression_tol", 1e-6)),
        threshold=float(_positive(sec, "threshold", 5e-3)),
        n_schedules=int(sec.get("n_schedules", 10, "int")),
        eval_paths=int(_positive(sec, "eval_paths", n_paths, "int")),
        chunk=int(_positive(sec, "chunk", 20_000, "int")),
    )
    if num.seed < 0:
        raise ConfigError("numerics.seed", "must be non-negative")
    if num.features not in FEATURE_KINDS:
        raise ConfigError("numerics.features", f"expected one of {', '.join(FEATURE_KINDS)}")
    if num.n_schedules < 0:
        raise ConfigError("numerics.n_schedules", "must be non-negative")
    sec.finish()
    return num, dict(num.__dict__)


def parse(doc: dict, mode: str | None = None, seed: int | None = None,
          paths: int | None = None) -> ExperimentConfig:
    """Validate a parsed document; ``mode``, ``seed`` and ``paths`` override it."""
    top = _Section(doc, "")
    doc_mode = top.get("mode", None, "str")
    mode = mode or doc_mode
    if mode is None:
        raise ConfigError("mode", "missing required field")
    if mode not in MODES:
        raise ConfigError("mode", f"unknown mode {mode!r}; known: {', '.join(MODES)}")

    num_doc = dict(top.get("numerics", {}, "table"))
    if seed is not None:
        num_doc["seed"] = seed
    if paths is not None:
        num_doc["n_paths"] = paths
        num_doc.pop("eval_paths", None)
    numerics, num_out = _numerics(num_doc, mode)

    measure, density, kern_out = _kernel(top.get("kernel", kind="table"))
    levy, levy_out = _levy(top.get("levy", kind="table"))

    coef = _Section(top.get("coefficients", kind="table"), "coefficients")
    init = _Section(top.get("initial", {}, "table"), "initial")
    y0_raw = init.get("y0", None)
    if y0_raw is None:
        d = int(_positive(coef, "dim", 1, "int"))
        y0 = np.zeros(d)
    else:
        y0 = np.atleast_1d(np.asarray(y0_raw if isinstance(y0_raw, list) else [y0_raw], dtype=object))
        if y0.ndim != 1 or not all(_num(v) for v in y0):
            raise ConfigError("initial.y0", "expected a number or an array of numbers")
        y0 = y0.astype(float)
        d = int(coef.get("dim", y0.size, "int"))
        if d != y0.size:
            raise ConfigError("coefficients.dim", f"dimension {d} does not match initial.y0")
    init.finish()

    action_names = ()
    n_actions = 1
    ctl_doc = top.get("control", None, "table")
    if ctl_doc is not None:
        ctl = _Section(ctl_doc, "control")
        acts = ctl.get("actions", kind="list")
        if not acts:
            raise ConfigError("control.actions", "action set must be nonempty")
        action_names = tuple(str(a) for a in acts)
        if len(set(action_names)) != len(action_names):
            raise ConfigError("control.actions", "action names must be distinct")
        n_actions = len(acts)

    ctx = Context(d, levy.marks, n_actions)
    f = _family(coef, "f", "f", ctx)
    sigma = _family(coef, "sigma", "sigma", ctx)
    coef.finish()
    coeffs = CoefficientSet(f.fn, sigma.fn, f.lipschitz, sigma.lipschitz)

    resolved = {
        "mode": mode,
        "kernel": kern_out,
        "levy": levy_out,
        "coefficients": {"dim": d, "f": f.params, "sigma": sigma.params},
        "initial": {"y0": y0.tolist()},
        "numerics": num_out,
    }

    problem = None
    if ctl_doc is None:
        if mode in CONTROL_MODES:
            raise ConfigError("control", f"mode {mode!r} needs a control section")
    else:
        r = _family(ctl, "r", "r", ctx)
        l = _family(ctl, "l", "l", ctx)
        g = _family(ctl, "g", "g", ctx)
        C_r = ctl.get("C_r", r.bound if math.isfinite(r.bound) else _REQUIRED, "number")
        if not C_r > 0:
            raise ConfigError("control.C_r", "must be positive")
        if C_r < r.bound:
            raise ConfigError("control.C_r", f"intensity family reaches {r.bound!r} above C_r={C_r!r}")
        alpha = ctl.get("alpha", 2.0, "number")
        if not alpha > 1:
            raise ConfigError("control.alpha", "integrability exponent must exceed 1")
        ctl.finish()
        try:
            problem = ControlProblem(measure, coeffs, levy, y0, numerics.grid, list(range(n_actions)),
                                     r.fn, float(C_r), l.fn, g.fn, float(alpha))
        except ValueError as exc:
            raise ConfigError("control", str(exc)) from exc
        resolved["control"] = {
            "actions": list(action_names), "r": r.params, "l": l.params, "g": g.params,
            "C_r": float(C_r), "alpha": float(alpha),
        }
    top.finish()
    return ExperimentConfig(mode, resolved, measure, density, levy, coeffs, y0, numerics,
                            problem, action_names)


def load(path: str | Path, **overrides) -> ExperimentConfig:
    """Read and validate a TOML experiment file."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("", f"invalid TOML: {exc}") from exc
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    return parse(doc, **overrides)
