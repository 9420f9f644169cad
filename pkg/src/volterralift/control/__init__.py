from .bsde import (
    BsdeSolution,
    FeatureMap,
    RegressionError,
    RelationReport,
    bsde_solve,
    feedback_policy,
    fit_linear,
    fundamental_relation_check,
)
from .problem import ControlProblem, Policy, ProblemError, hamiltonian, hamiltonian_batch, lipschitz_constant
from .simulate import (
    Ensemble,
    closed_loop_simulate,
    controlled_simulate,
    cost_evaluate,
    reweighted_cost,
    simulate_ensemble,
)

__all__ = [
    "BsdeSolution", "ControlProblem", "Ensemble", "FeatureMap", "Policy", "ProblemError",
    "RegressionError", "RelationReport", "bsde_solve", "closed_loop_simulate", "controlled_simulate",
    "cost_evaluate", "feedback_policy", "fit_linear", "fundamental_relation_check", "hamiltonian",
    "hamiltonian_batch", "lipschitz_constant", "reweighted_cost", "simulate_ensemble",
]
