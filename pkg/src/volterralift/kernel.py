"""Completely monotone kernels as finite atomic Bernstein measures.

A kernel ``k(t) = sum_j w_j exp(-x_j t)`` is stored through its atoms
``(x_j, w_j)``.  Continuous measures (the fractional kernel
``t**(alpha-1) / Gamma(alpha)`` or gamma mixtures) are reduced to atoms by
integrating the density exactly over the cells of a geometric grid.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammainc


class KernelError(ValueError):
    pass


def weight(x):
    """Weight ``1 ∧ x**-1/2`` of the state-space norms; equals 1 at ``x = 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise KernelError(f"weight undefined for negative rate {x.min()!r}")
    with np.errstate(divide="ignore"):
        out = np.minimum(1.0, np.where(x > 0, x, 1.0) ** -0.5)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BernsteinMeasure:
    """Finite atomic measure ``sum_j w_j delta_{x_j}`` on ``[0, inf)``.

    ``eps`` is the margin for which the moment ``sum_{x_j >= 1} w_j x_j**(eps - 1/2)``
    is required finite.  The norm constants used by the lift are computed once
    at construction:

    ``c_immersion``   sum w_j omega(x_j)                (squared norm of the immersion)
    ``c_projection2`` sum w_j / ((1 + x_j) omega(x_j))  (squared bound of the projection)
    ``c_condition13`` c_immersion + c_projection2
    """

    rates: np.ndarray
    weights: np.ndarray
    eps: float = 0.25
    provenance: dict | None = None
    omega: np.ndarray = field(init=False, repr=False)
    moment: float = field(init=False)
    c_immersion: float = field(init=False)
    c_projection2: float = field(init=False)
    c_condition13: float = field(init=False)

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float).reshape(-1)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if rates.size == 0 or rates.shape != weights.shape:
            raise KernelError("a measure needs at least one atom and one weight per rate")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise KernelError("decay rates must be finite and nonnegative")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise KernelError("atom weights must be finite and strictly positive")
        if np.any(np.diff(rates) <= 0):
            raise KernelError("rates must be strictly increasing (use make_atomic to sort)")
        if not 0 < self.eps < 0.5:
            raise KernelError(f"eps must lie in (0, 1/2), got {self.eps}")
        rates.flags.writeable = False
        weights.flags.writeable = False
        om = np.atleast_1d(weight(rates))
        om.flags.writeable = False
        big = rates >= 1
        set_ = object.__setattr__
        set_(self, "rates", rates)
        set_(self, "weights", weights)
        set_(self, "omega", om)
        set_(self, "moment", float(np.sum(weights[big] * rates[big] ** (self.eps - 0.5))))
        set_(self, "c_immersion", float(np.sum(weights * om)))
        set_(self, "c_projection2", float(np.sum(weights / ((1.0 + rates) * om))))
        set_(self, "c_condition13", float(np.sum(weights * (om + 1.0 / ((1.0 + rates) * om)))))

    @property
    def n_atoms(self) -> int:
        return self.rates.size

    @property
    def c_projection(self) -> float:
        return math.sqrt(self.c_projection2)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def __call__(self, t):
        return kernel_eval(self, t)

    def laplace(self, s):
        """Laplace transform ``sum_j w_j / (s + x_j)`` of the kernel."""
        s = np.asarray(s, dtype=float)
        out = np.sum(self.weights / (s[..., None] + self.rates), axis=-1)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "atoms": [{"x": float(x), "w": float(w)} for x, w in zip(self.rates, self.weights)],
            "eps": float(self.eps),
        }
        if self.provenance is not None:
            doc["provenance"] = dict(self.provenance)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "BernsteinMeasure":
        atoms = [(a["x"], a["w"]) for a in doc["atoms"]]
        return make_atomic(atoms, eps=doc.get("eps", 0.25), provenance=doc.get("provenance"))

    @classmethod
    def from_json(cls, text: str) -> "BernsteinMeasure":
        return cls.from_dict(json.loads(text))


def make_atomic(atoms: Sequence[tuple[float, float]], eps: float = 0.25,
                provenance: dict | None = None) -> BernsteinMeasure:
    """Build a measure from ``(rate, weight)`` pairs, sorting by rate."""
    if len(atoms) == 0:
        raise KernelError("empty atom list")
    arr = np.array(atoms, dtype=float).reshape(-1, 2)
    if np.any(arr[:, 1] <= 0):
        raise KernelError("nonpositive weight in atom list")
    if np.any(arr[:, 0] < 0):
        raise KernelError("negative decay rate in atom list")
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    dup = np.nonzero(np.diff(arr[:, 0]) == 0)[0]
    if dup.size:
        x = arr[dup[0], 0]
        raise KernelError(
            f"duplicate rate {x!r}: merge the atoms into a single (rate, summed weight) pair"
        )
    return BernsteinMeasure(arr[:, 0], arr[:, 1], eps=eps, provenance=provenance)


def kernel_eval(m: BernsteinMeasure, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise KernelError("kernel evaluated at negative time")
    out = np.exp(-np.multiply.outer(t, m.rates)) @ m.weights
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DensitySpec:
    """A continuous Bernstein density to be reduced to atoms.

    family:
      ``fractional``       density x**-alpha / (Gamma(alpha) Gamma(1-alpha)),
                           kernel t**(alpha-1) / Gamma(alpha); needs alpha in (1/2, 1)
      ``exponential-mix``  explicit ``atoms`` passed through unchanged
      ``gamma-mix``        sum of c * Gamma(shape, rate) densities given as
                           ``components = [(c, shape, rate), ...]``;
                           kernel sum c * (rate / (rate + t))**shape
    """

    family: str
    alpha: float | None = None
    atoms: tuple = ()
    components: tuple = ()
    x_min: float = 1e-2
    x_max: float = 1e4
    nodes: int = 60
    eps: float | None = None

    def __post_init__(self):
        if self.family not in ("fractional", "exponential-mix", "gamma-mix"):
            raise KernelError(f"unknown density family {self.family!r}")
        if self.family == "fractional":
            if self.alpha is None or not 0.5 < self.alpha < 1.0:
                raise KernelError(
                    f"fractional exponent alpha={self.alpha} violates 1/2 < alpha < 1"
                )
        if self.family != "exponential-mix":
            if self.nodes < 2:
                raise KernelError("quadrature grid needs at least two nodes")
            if not 0 < self.x_min < self.x_max:
                raise KernelError("need 0 < x_min < x_max")

    def target(self, t):
        """Exact kernel of the continuous measure (the quadrature oracle)."""
        t = np.asarray(t, dtype=float)
        if self.family == "fractional":
            return t ** (self.alpha - 1.0) / gamma_fn(self.alpha)
        if self.family == "gamma-mix":
            return sum(c * (b / (b + t)) ** a for c, a, b in self.components)
        return kernel_eval(make_atomic(self.atoms), t)

    def default_eps(self) -> float:
        if self.eps is not None:
            return self.eps
        if self.family == "fractional":
            return (self.alpha - 0.5) / 2.0
        return 0.25


def _cell_edges(x_min: float, x_max: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    ratio = (x_max / x_min) ** (1.0 / (n - 1))
    j = np.arange(n)
    nodes = x_min * ratio**j
    edges = np.empty(n + 1)
    edges[0] = 0.0
    edges[1:n] = x_min * ratio ** (j[1:] - 0.5)
    edges[n] = x_max * ratio**0.5
    return nodes, edges


def discretize_density(spec: DensitySpec) -> BernsteinMeasure:
    """Reduce a continuous Bernstein density to atoms on a geometric grid.

    Node ``j`` sits at ``x_min * ratio**j`` and carries the exact mass of the
    geometric cell around it.  The first cell also absorbs ``[0, x_min)``;
    that lumped mass is placed at its barycenter, because the low tail is what
    dominates the kernel at large ``t``.
    """
    if spec.family == "exponential-mix":
        return make_atomic(list(spec.atoms), eps=spec.default_eps())

    nodes, edges = _cell_edges(spec.x_min, spec.x_max, spec.nodes)
    lo, hi = edges[:-1], edges[1:]
    if spec.family == "fractional":
        a = spec.alpha
        norm = gamma_fn(a) * gamma_fn(1.0 - a)
        mass = (hi ** (1 - a) - lo ** (1 - a)) / ((1 - a) * norm)
        first_moment = (hi[0] ** (2 - a)) / ((2 - a) * norm)
    else:
        mass = np.zeros_like(nodes)
        first_moment = 0.0
        for c, shape, rate in spec.components:
            if c <= 0 or shape <= 0 or rate <= 0:
                raise KernelError("gamma-mix components need positive (c, shape, rate)")
            cdf = gammainc(shape, rate * edges)
            cdf[-1] = 1.0  # upper tail goes to the last node so k(0) is preserved
            mass += c * np.diff(cdf)
            first_moment += c * (shape / rate) * gammainc(shape + 1.0, rate * hi[0])
    keep = mass > 0
    if not np.any(keep):
        raise KernelError("quadrature grid captured no mass")
    nodes = nodes.copy()
    nodes[0] = first_moment / mass[0]
    provenance = {
        "family": spec.family,
        "x_min": spec.x_min,
        "x_max": spec.x_max,
        "nodes": spec.nodes,
    }
    if spec.alpha is not None:
        provenance["alpha"] = spec.alpha
    if spec.components:
        provenance["components"] = [list(map(float, c)) for c in spec.components]
    atoms = list(zip(nodes[keep], mass[keep]))
    return make_atomic(atoms, eps=spec.default_eps(), provenance=provenance)


@dataclass(frozen=True)
class SingularityReport:
    atomic_index: float
    continuous_index: float | None
    at_boundary: bool

    def lines(self) -> list[str]:
        out = [f"atomic_index={self.atomic_index:g}"]
        if self.continuous_index is not None:
            out.append(f"continuous_index={self.continuous_index:g}")
        if self.at_boundary:
            out.append("warning: continuous index at the admissibility boundary 1/2")
        return out


def singularity_index(m: BernsteinMeasure, boundary_margin: float = 0.01) -> SingularityReport:
    """Singularity index of the kernel at the origin.

    The Laplace transform of a finite atomic measure decays like ``1/s``, so the
    atomic index is always 0.  For a fractional provenance the index of the
    approximated continuous kernel, ``1 - alpha``, is reported alongside.
    """
    cont = None
    prov = m.provenance or {}
    if prov.get("family") == "fractional":
        cont = 1.0 - float(prov["alpha"])
    elif prov.get("family") == "gamma-mix":
        cont = 0.0
    at_boundary = cont is not None and 0.5 - cont < boundary_margin
    return SingularityReport(0.0, cont, at_boundary)


def quadrature_error(m: BernsteinMeasure, spec: DensitySpec, t_min: float = 0.05,
                     t_max: float = 5.0, n: int = 400) -> float:
    """Max relative error of the atomic kernel against the continuous target."""
    t = np.geomspace(t_min, t_max, n)
    exact = spec.target(t)
    return float(np.max(np.abs(kernel_eval(m, t) / exact - 1.0)))
