"""Command-line runner.

``volterralift <mode> --config FILE --out DIR [--seed N] [--paths N]`` runs one
experiment; ``volterralift kernel ...`` inspects a kernel without a config.

Exit status: 0 success, 1 a run-level check failed, 2 invalid configuration,
3 numerical fault.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, ConfigError, ExperimentConfig, load
from .control import (
    Policy,
    ProblemError,
    RegressionError,
    bsde_solve,
    cost_evaluate,
    feedback_policy,
    fundamental_relation_check,
    simulate_ensemble,
)
from .kernel import DensitySpec, KernelError, discretize_density, kernel_eval, make_atomic, singularity_index
from .levy import STREAM_SCHEDULE, IntensityBoundError, sample_path, substream
from .lift import PicardDivergence, forcing_eval, simulate_lift, trajectory_csv
from .volterra import compare_paths, simulate_volterra

logger = logging.getLogger("volterralift")

NUMERICAL_FAULTS = (IntensityBoundError, PicardDivergence, RegressionError, ProblemError,
                    KernelError, FloatingPointError, np.linalg.LinAlgError)


def _fmt(v: float) -> str:
    return repr(float(v))


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
    return buf.getvalue()


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# --- modes -------------------------------------------------------------------------

def _kernel_report(cfg_measure, density, t_min: float, t_max: float) -> tuple[dict, str]:
    m = cfg_measure
    sing = singularity_index(m)
    t = np.geomspace(t_min, t_max, 41)
    k_atomic = kernel_eval(m, t)
    k_target = density.target(t) if density is not None else k_atomic
    rel = np.abs(k_atomic / k_target - 1.0)
    report = {
        "n_atoms": m.n_atoms,
        "eps": m.eps,
        "condition_constant": m.c_condition13,
        "c_immersion": m.c_immersion,
        "c_projection": m.c_projection,
        "moment": m.moment,
        "total_mass": m.total_mass,
        "singularity": {
            "atomic_index": sing.atomic_index,
            "continuous_index": sing.continuous_index,
            "at_boundary": sing.at_boundary,
        },
        "quadrature_max_rel_error": float(rel.max()),
        "quadrature_window": [t_min, t_max],
    }
    table = _csv(["t", "k_atomic", "k_target", "rel_error"], zip(t, k_atomic, k_target, rel))
    return report, table


def _run_kernel_check(cfg: ExperimentConfig) -> tuple[dict, dict, int]:
    k = cfg.resolved["kernel"]
    report, table = _kernel_report(cfg.measure, cfg.density, k["check_t_min"], k["check_t_max"])
    files = {
        "measure.json": cfg.measure.to_json() + "\n",
        "kernel_report.json": _dumps(report),
        "quadrature.csv": table,
    }
    return files, report, 0


def _run_equivalence(cfg: ExperimentConfig) -> tuple[dict, dict, int]:
    num = cfg.numerics
    grid = num.grid
    forcing = lambda t: forcing_eval(cfg.y0, cfg.measure, t)  # noqa: E731
    rows, first = [], None
    for p in range(num.n_paths):
        path = sample_path(cfg.levy, num.T, substream(num.seed, p))
        lt = simulate_lift(cfg.measure, cfg.coeffs, cfg.levy, path, grid, cfg.y0)
        vt = simulate_volterra(cfg.measure, cfg.coeffs, cfg.levy, path, grid, forcing)
        rep = compare_paths(lt, vt)
        rows.append((p, len(path), rep.sup_gap, rep.rmse, int(rep.sup_gap < num.threshold)))
        if first is None:
            first = (lt, vt)
    ok = all(r[-1] for r in rows)
    report = {
        "n_paths": num.n_paths,
        "threshold": num.threshold,
        "max_sup_gap": max(r[2] for r in rows),
        "all_below_threshold": ok,
    }
    lt, vt = first
    files = {
        "equivalence.csv": _csv(["path", "n_events", "sup_gap", "rmse", "ok"], rows),
        "equivalence_report.json": _dumps(report),
        "trajectory.csv": lt.to_csv(),
        "trajectory_volterra.csv": vt.to_csv(),
    }
    return files, report, 0 if ok else 1


def _policies(cfg: ExperimentConfig) -> list[Policy]:
    names = cfg.action_names
    pols = [Policy.constant(i, name=f"constant:{n}") for i, n in enumerate(names)]
    M = cfg.numerics.grid_steps
    rng = substream(cfg.numerics.seed, 0, STREAM_SCHEDULE)
    for j in range(cfg.numerics.n_schedules):
        pols.append(Policy.schedule(rng.integers(0, len(names), M), name=f"schedule:{j + 1}"))
    return pols


def _solve(cfg: ExperimentConfig):
    problem, num = cfg.problem, cfg.numerics
    problem.validate()
    sol = bsde_solve(problem, num.n_paths, num.seed, num.feature_map, num.regression_tol, num.chunk)
    ratio = np.abs(sol.martingale_mean) / np.maximum(sol.martingale_se, 1e-300)
    diag = {
        "theta0": sol.theta0,
        "theta0_se": sol.theta0_se,
        "terminal_rmse": sol.terminal_rmse,
        "terminal_within_tolerance": sol.terminal_rmse <= num.regression_tol,
        "martingale_ok": sol.martingale_ok(),
        "martingale_max_ratio": float(ratio.max()),
        "min_r2": float(np.min(sol.r2)),
        "ridge_steps": sorted(int(k) for k in sol.ridge_steps),
        "z_square_sum": sol.z_square_sum,
    }
    return sol, diag


def _closed_loop_files(cfg: ExperimentConfig, fb: Policy) -> tuple[dict, dict]:
    num, problem = cfg.numerics, cfg.problem
    ens = simulate_ensemble(problem, fb, num.eval_paths, num.seed, measure="controlled", chunk=num.chunk)
    grid = problem.grid
    share = np.stack([np.mean(ens.actions == i, axis=1) for i in range(problem.n_actions)], axis=1)
    rows = [(_fmt(grid[k]), *(_fmt(v) for v in share[k])) for k in range(grid.size - 1)]
    path0 = [cfg.action_names[a] for a in ens.actions[:, 0]]
    traj = trajectory_csv(grid, ens.u[:, 0])
    lines = traj.splitlines()
    traj = "\n".join([lines[0] + ",action"]
                     + [ln + "," + (path0[k] if k < len(path0) else "") for k, ln in enumerate(lines[1:])]) + "\n"
    cost = ens.cost
    summary = {
        "J": float(cost.mean()),
        "J_se": float(cost.std(ddof=1) / math.sqrt(cost.size)),
        "n_paths": num.eval_paths,
    }
    files = {
        "trajectory.csv": traj,
        "actions.csv": _csv(["t", *(f"share:{n}" for n in cfg.action_names)], rows),
    }
    return files, summary


def _run_solve(cfg: ExperimentConfig) -> tuple[dict, dict, int]:
    num = cfg.numerics
    sol, diag = _solve(cfg)
    fb = feedback_policy(sol, cfg.problem)
    rel = fundamental_relation_check(cfg.problem, sol, _policies(cfg) + [fb], num.eval_paths, num.seed)
    cl_files, cl = _closed_loop_files(cfg, fb)
    report = {**diag, "relation_ok": rel.ok, "closed_loop": cl}
    files = {
        "value.csv": sol.value_csv(),
        "policy_table.csv": rel.to_csv(),
        "trajectory.csv": cl_files["trajectory.csv"],
        "actions.csv": cl_files["actions.csv"],
        "solve_report.json": _dumps(report),
    }
    return files, report, 0 if rel.ok else 1


def _run_evaluate(cfg: ExperimentConfig) -> tuple[dict, dict, int]:
    num = cfg.numerics
    cfg.problem.validate()
    rows = []
    for pol in _policies(cfg):
        J, se = cost_evaluate(cfg.problem, pol, num.eval_paths, num.seed, num.chunk)
        rows.append([pol.name, J, se])
    best = min(r[1] for r in rows)
    table = _csv(["policy", "J", "SE", "gap"], [(n, J, se, J - best) for n, J, se in rows])
    report = {"best_J": best, "best_policy": min(rows, key=lambda r: r[1])[0], "n_paths": num.eval_paths}
    return {"policy_table.csv": table, "evaluate_report.json": _dumps(report)}, report, 0


def _run_closed_loop(cfg: ExperimentConfig) -> tuple[dict, dict, int]:
    sol, diag = _solve(cfg)
    fb = feedback_policy(sol, cfg.problem)
    files, cl = _closed_loop_files(cfg, fb)
    report = {**diag, "closed_loop": cl}
    files.update({"value.csv": sol.value_csv(), "closed_loop_report.json": _dumps(report)})
    return files, report, 0


RUNNERS = {
    "kernel-check": _run_kernel_check,
    "equivalence": _run_equivalence,
    "solve": _run_solve,
    "evaluate": _run_evaluate,
    "closed-loop": _run_closed_loop,
}


def run(cfg: ExperimentConfig, out: str | Path, source: bytes = b"") -> int:
    """Run ``cfg`` and write its outputs plus ``manifest.json`` into ``out``."""
    files, report, status = RUNNERS[cfg.mode](cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "tool": "volterralift",
        "version": __version__,
        "mode": cfg.mode,
        "seed": cfg.numerics.seed,
        "config": cfg.resolved,
        "config_hash": cfg.content_hash,
        "source_sha256": hashlib.sha256(source).hexdigest(),
        "outputs": {n: hashlib.sha256(t.encode()).hexdigest() for n, t in sorted(files.items())},
        "status": status,
    }
    (out / "manifest.json").write_text(_dumps(manifest))
    return status


# --- kernel subcommand -------------------------------------------------------------

def _parse_atoms(text: str) -> list[tuple[float, float]]:
    atoms = []
    for item in text.split(","):
        x, _, w = item.partition(":")
        atoms.append((float(x), float(w)))
    return atoms


def _kernel_command(args) -> int:
    if args.family == "exponential-mix":
        if not args.atoms:
            raise ConfigError("--atoms", "exponential-mix needs --atoms x1:w1,x2:w2,...")
        spec = None
        m = make_atomic(_parse_atoms(args.atoms), eps=args.eps or 0.25)
    else:
        comps = ()
        if args.family == "gamma-mix":
            if not args.components:
                raise ConfigError("--components", "gamma-mix needs --components c:shape:rate,...")
            comps = tuple(tuple(float(v) for v in c.split(":")) for c in args.components.split(","))
        spec = DensitySpec(args.family, alpha=args.alpha, components=comps, x_min=args.x_min,
                           x_max=args.x_max, nodes=args.nodes, eps=args.eps)
        m = discretize_density(spec)
    out = sys.stdout
    if args.check:
        report, _ = _kernel_report(m, spec, 0.05, 5.0)
        out.write(f"atoms={report['n_atoms']}\n")
        out.write(f"condition_constant={report['condition_constant']!r}\n")
        out.write(f"c_immersion={report['c_immersion']!r}\n")
        out.write(f"c_projection={report['c_projection']!r}\n")
        out.write(f"moment={report['moment']!r}\n")
        for line in singularity_index(m).lines():
            out.write(line + "\n")
        if spec is not None:
            out.write(f"quadrature_max_rel_error={report['quadrature_max_rel_error']!r}\n")
    if args.eval:
        t = np.array([float(v) for v in args.eval.split(",")])
        out.write(_csv(["t", "k"], zip(t, np.atleast_1d(kernel_eval(m, t)))))
    if not (args.check or args.eval):
        out.write(m.to_json() + "\n")
    return 0


# --- entry point -------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volterralift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        s = sub.add_parser(mode, help=f"run the {mode} experiment")
        s.add_argument("--config", required=True, help="TOML experiment file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="override numerics.seed")
        s.add_argument("--paths", type=int, help="override numerics.n_paths")
    k = sub.add_parser("kernel", help="discretize and inspect a kernel")
    k.add_argument("--family", default="fractional", choices=["fractional", "exponential-mix", "gamma-mix"])
    k.add_argument("--alpha", type=float)
    k.add_argument("--atoms", help="x1:w1,x2:w2,... for exponential-mix")
    k.add_argument("--components", help="c:shape:rate,... for gamma-mix")
    k.add_argument("--nodes", type=int, default=60)
    k.add_argument("--x-min", type=float, default=1e-2)
    k.add_argument("--x-max", type=float, default=1e4)
    k.add_argument("--eps", type=float)
    k.add_argument("--check", action="store_true", help="print constants and the singularity report")
    k.add_argument("--eval", help="comma-separated times; prints CSV t,k")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.mode == "kernel":
            return _kernel_command(args)
        source = Path(args.config).read_bytes() if Path(args.config).is_file() else b""
        cfg = load(args.config, mode=args.mode, seed=args.seed, paths=args.paths)
        return run(cfg, args.out, source)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_FAULTS + (ValueError,) as exc:
        if args.mode == "kernel":
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if not isinstance(exc, NUMERICAL_FAULTS):
            raise
        print(f"numerical fault ({type(exc).__module__}): {exc}", file=sys.stderr)
        return 3

if __name__ == "__main__":
    sys.exit(main())
