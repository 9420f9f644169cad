"""Backward least-squares regression solver for the control BSDE.

On a reference-law ensemble of the lift the scheme runs backwards over the
grid::

    cont_k   = E[Theta_{k+1} | Y_k]                               (regression)
    Z_k(i)   = E[(Theta_{k+1} - cont_k) dpi_i | Y_k] / (lambda_i dt)
    Theta_k  = cont_k + dt * H(t_k, Y_k, Z_k)

with ``dpi_i`` the compensated count of mark ``i`` over the cell.  The
conditional expectations are linear regressions on a feature map of the
lift state, which also serve as the surrogates ``V`` and ``V~`` for the
feedback law.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .problem import ControlProblem, Policy, hamiltonian_batch
from .simulate import DEFAULT_CHUNK, cost_evaluate, simulate_ensemble

logger = logging.getLogger(__name__)


class RegressionError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """Features of a lift ensemble ``(P, N, d)``.

    ``kind``: ``u`` (monomials of the projection up to ``degree``),
    ``lift`` (the raw lift coordinates) or ``u+lift`` (both).
    A constant column always comes first.
    """

    kind: str = "u"
    degree: int = 3

    def __post_init__(self):
        if self.kind not in ("u", "lift", "u+lift"):
            raise ValueError(f"unknown feature map {self.kind!r}")
        if self.degree < 1:
            raise ValueError("feature degree must be at least 1")

    def __call__(self, Y: np.ndarray, u: np.ndarray) -> np.ndarray:
        P = u.shape[0]
        cols = [np.ones((P, 1))]
        if self.kind in ("u", "u+lift"):
            cols.extend(_monomials(u, self.degree))
        if self.kind in ("lift", "u+lift"):
            cols.append(Y.reshape(P, -1))
        return np.hstack(cols)

    def n_features(self, n_atoms: int, d: int) -> int:
        n = 1
        if self.kind in ("u", "u+lift"):
            n += math.comb(d + self.degree, self.degree) - 1
        if self.kind in ("lift", "u+lift"):
            n += n_atoms * d
        return n


def _monomials(u: np.ndarray, degree: int) -> list[np.ndarray]:
    d = u.shape[1]
    out = []
    layer = [(np.ones(u.shape[0]), 0)]
    for _ in range(degree):
        nxt = []
        for col, start in layer:
            for c in range(start, d):
                nxt.append((col * u[:, c], c))
        out.extend(v[:, None] for v, _ in nxt)
        layer = nxt
    return out


@dataclass
class LinearFit:
    """Least-squares fit on standardized non-constant feature columns."""

    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    coef: np.ndarray        # (1 + n_active, targets)
    ridge: float = 0.0
    r2: float = float("nan")

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (X[:, self.active] - self.center) / self.scale
        return self.coef[0] + Z @ self.coef[1:]


def fit_linear(X: np.ndarray, y: np.ndarray, rcond: float = 1e-10) -> LinearFit:
    """Regress ``y`` (P,) or (P, K) on ``X`` (whose first column is constant).

    Columns with no spread are folded into the intercept.  If the standardized
    design is still numerically rank deficient a small ridge term is added.
    """
    y2 = y[:, None] if y.ndim == 1 else y
    P = X.shape[0]
    Xf = X[:, 1:]
    std = Xf.std(axis=0)
    spread = std > 1e-12 * (1.0 + np.abs(Xf).max(axis=0))
    active = np.concatenate(([False], spread))
    center = Xf[:, spread].mean(axis=0)
    scale = std[spread]
    Z = (Xf[:, spread] - center) / scale
    A = np.hstack([np.ones((P, 1)), Z])
    ridge = 0.0
    coef, _, rank, sv = np.linalg.lstsq(A, y2, rcond=None)
    if rank < A.shape[1] or (sv.size and sv[-1] < rcond * sv[0]):
        ridge = 1e-8 * P
        logger.info("rank-deficient regression (rank %d of %d); ridge fallback %.3g",
                    rank, A.shape[1], ridge)
        G = A.T @ A
        G[1:, 1:] += ridge * np.eye(A.shape[1] - 1)
        coef = np.linalg.solve(G, A.T @ y2)
    fit = LinearFit(center, scale, active, coef, ridge)
    resid = y2 - A @ coef
    tot = np.sum((y2 - y2.mean(axis=0)) ** 2)
    fit.r2 = float(1.0 - np.sum(resid**2) / tot) if tot > 0 else 1.0
    if y.ndim == 1:
        fit.coef = coef[:, 0]
    return fit


@dataclass
class BsdeSolution:
    problem: ControlProblem
    features: FeatureMap
    theta0: float
    theta0_se: float
    theta_mean: np.ndarray          # (M + 1,) ensemble mean of Theta_k
    continuation: list              # LinearFit per cell k < M for E[Theta_{k+1} | Y_k]
    z_fits: list                    # LinearFit per cell k < M for Z_k, one target per mark
    terminal: LinearFit
    terminal_rmse: float
    r2: np.ndarray
    martingale_mean: np.ndarray
    martingale_se: np.ndarray
    z_square_sum: float             # ensemble mean of sum_k dt sum_i Z^2 lambda_i
    ridge_steps: list = field(default_factory=list)
    n_paths: int = 0

    @property
    def grid(self) -> np.ndarray:
        return self.problem.grid

    def martingale_ok(self, n_se: float = 3.0, atol: float = 1e-10) -> bool:
        """Mean martingale residual within ``n_se`` standard errors at every step."""
        return bool(np.all(np.abs(self.martingale_mean) <= n_se * self.martingale_se + atol))

    def z(self, k: int, Y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Surrogate ``V~(t_k, Y; xi_i)`` for an ensemble, shape (P, n_marks)."""
        return self.z_fits[k].predict(self.features(Y, u)).reshape(u.shape[0], -1)

    def value(self, k: int, Y: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Surrogate ``V(t_k, Y)``."""
        X = self.features(Y, u)
        if k == self.grid.size - 1:
            return self.terminal.predict(X)
        dt = self.grid[k + 1] - self.grid[k]
        h, _, _ = hamiltonian_batch(self.problem, float(self.grid[k]), u, self.z(k, Y, u))
        return self.continuation[k].predict(X) + dt * h

    def value_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,theta\n")
        for t, v in zip(self.grid, self.theta_mean):
            buf.write(f"{float(t)!r},{float(v)!r}\n")
        return buf.getvalue()


def bsde_solve(problem: ControlProblem, n_paths: int, seed: int, features: FeatureMap | None = None,
               regression_tol: float = 1e-6, chunk: int = DEFAULT_CHUNK) -> BsdeSolution:
    features = features or FeatureMap()
    M = problem.grid.size - 1
    N, d = problem.measure.n_atoms, problem.dim
    nf = features.n_features(N, d)
    if n_paths < 2 * nf:
        raise RegressionError(f"{n_paths} paths are too few for {nf} regression features")
    if features.kind == "u" and N > 1:
        logger.warning("features use only u = PY; the value function depends on the full lift state")

    # forward pass under the reference law; the policy is irrelevant there
    ens = simulate_ensemble(problem, Policy.constant(0), n_paths, seed, measure="base",
                            keep_states=True, chunk=chunk)
    lam = problem.levy.rates
    theta = np.asarray(ens.terminal, dtype=float).copy()
    X = features(ens.states[M], ens.u[M])
    terminal = fit_linear(X, theta)
    terminal_rmse = float(np.sqrt(np.mean((terminal.predict(X) - theta) ** 2)))
    if terminal_rmse > regression_tol:
        logger.warning("terminal fit RMSE %.3g exceeds regression tolerance %.3g", terminal_rmse, regression_tol)

    theta_mean = np.empty(M + 1)
    theta_mean[M] = theta.mean()
    cont_fits: list = [None] * M
    z_fits: list = [None] * M
    r2 = np.empty(M)
    mart_mean = np.empty(M)
    mart_se = np.empty(M)
    z_sq = np.zeros(n_paths)
    ridge_steps = []
    for k in range(M - 1, -1, -1):
        t, dt = float(problem.grid[k]), float(problem.grid[k + 1] - problem.grid[k])
        Y, u = ens.states[k], ens.u[k]
        X = features(Y, u)
        cf = fit_linear(X, theta)
        cont = cf.predict(X)
        resid = theta - cont
        dpi = ens.counts[k] - lam * dt
        zf = fit_linear(X, resid[:, None] * dpi / (lam * dt))
        Z = zf.predict(X).reshape(n_paths, -1)
        h, _, _ = hamiltonian_batch(problem, t, u, Z)
        jump_part = np.sum(Z * dpi, axis=1)
        mart_mean[k] = np.mean(resid - jump_part)
        # in-sample residuals have zero mean, so the tested mean is that of the
        # jump part; both increments enter the standard error
        mart_se[k] = math.sqrt((resid.var(ddof=1) + jump_part.var(ddof=1)) / n_paths)
        r2[k] = cf.r2
        z_sq += dt * np.sum(Z**2 * lam, axis=1)
        if cf.ridge or zf.ridge:
            ridge_steps.append(k)
        cont_fits[k], z_fits[k] = cf, zf
        theta = cont + dt * h
        theta_mean[k] = theta.mean()
    if ridge_steps:
        logger.warning("ridge fallback %.3g used at %d of %d grid steps (rank-deficient features)",
                       1e-8 * n_paths, len(ridge_steps), M)

    return BsdeSolution(
        problem, features, float(theta.mean()), float(theta.std(ddof=1) / math.sqrt(n_paths)),
        theta_mean, cont_fits, z_fits, terminal, terminal_rmse, r2, mart_mean, mart_se,
        float(z_sq.mean()), ridge_steps, n_paths,
    )


def feedback_policy(solution: BsdeSolution, problem: ControlProblem | None = None) -> Policy:
    """Feedback law: the Hamiltonian minimizer at ``z = V~(t, Y(t-))``."""
    problem = problem or solution.problem

    def act(k, t, Y, u):
        _, arg, _ = hamiltonian_batch(problem, float(t), u, solution.z(k, Y, u))
        return arg

    return Policy.feedback(act, name="feedback")


@dataclass
class PolicyRow:
    name: str
    J: float
    se: float
    gap: float
    ok: bool


@dataclass
class RelationReport:
    theta0: float
    rows: list

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("policy,J,SE,gap,ok\n")
        for r in self.rows:
            buf.write(f"{r.name},{r.J!r},{r.se!r},{r.gap!r},{int(r.ok)}\n")
        return buf.getvalue()


def fundamental_relation_check(problem: ControlProblem, solution: BsdeSolution, policies, n_paths: int,
                               seed: int, n_se: float = 3.0) -> RelationReport:
    """Check ``J(gamma) >= theta0`` for every policy and equality at feedback ones.

    Both checks allow ``n_se`` standard errors plus a floating-point floor of
    ``1e-9 * max(1, |theta0|)`` for zero-variance cases.
    """
    floor = 1e-9 * max(1.0, abs(solution.theta0))
    rows = []
    for pol in policies:
        J, se = cost_evaluate(problem, pol, n_paths, seed)
        gap = J - solution.theta0
        if pol.kind == "feedback":
            se_comb = math.hypot(se, solution.theta0_se)
            ok = abs(gap) <= n_se * se_comb + floor
        else:
            ok = gap >= -n_se * se - floor
        rows.append(PolicyRow(pol.name, J, se, gap, bool(ok)))
    return RelationReport(solution.theta0, rows)
