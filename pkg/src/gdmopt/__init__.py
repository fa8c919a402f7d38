"""Conditional denoising diffusion as a solver for wireless network
optimization problems, with exact oracles, discriminative baselines and a
bound verifier."""

from ._validation import ConfigurationError, InputError, MetricError
from .baselines import GdConfig, MtfnnParams, gd_solve, mtfnn_predict, mtfnn_train
from .bounds import BoundScenario, bound_gap, monte_carlo_bounds
from .diffusion import (
    DiffusionModel,
    NoiseSchedule,
    SampleConfig,
    TrainConfig,
    Trajectory,
    build_cosine_schedule,
    cfg_epsilon,
    forward_noising,
    reverse_step,
    sample,
    sample_batch,
    train,
)
from .estimators import DiffusionOptimizer, GradientDescentOptimizer, MTFNNRegressor
from .evaluation import EvalReport, evaluate_model, exceed_ratio, run_ablation
from .oracle import (
    co_exhaustive,
    generate_dataset,
    load_dataset,
    nu_gridsearch,
    waterfilling,
)
from .problems import (
    ProblemSpec,
    constraint_violations,
    evaluate_objective,
    get_problem,
    project_feasible,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "InputError",
    "MetricError",
    "GdConfig",
    "MtfnnParams",
    "gd_solve",
    "mtfnn_predict",
    "mtfnn_train",
    "BoundScenario",
    "bound_gap",
    "monte_carlo_bounds",
    "DiffusionModel",
    "NoiseSchedule",
    "SampleConfig",
    "TrainConfig",
    "Trajectory",
    "build_cosine_schedule",
    "cfg_epsilon",
    "forward_noising",
    "reverse_step",
    "sample",
    "sample_batch",
    "train",
    "DiffusionOptimizer",
    "GradientDescentOptimizer",
    "MTFNNRegressor",
    "EvalReport",
    "evaluate_model",
    "exceed_ratio",
    "run_ablation",
    "co_exhaustive",
    "generate_dataset",
    "load_dataset",
    "nu_gridsearch",
    "waterfilling",
    "ProblemSpec",
    "constraint_violations",
    "evaluate_objective",
    "get_problem",
    "project_feasible",
]
