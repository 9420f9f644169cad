"""Markovian lifting and jump-intensity control of stochastic Volterra equations."""
from .kernel import BernsteinMeasure, DensitySpec, discretize_density, kernel_eval, make_atomic, weight
from .levy import JumpPath, LevyModel, girsanov_weight, sample_path, substream, thinning_sample
from .lift import CoefficientSet, LiftState, LiftTrajectory, picard_solve, simulate_lift
from .volterra import compare_paths, simulate_volterra

__version__ = "0.1.0"
