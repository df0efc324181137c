"""Differentially private solvers for stochastic saddle-point problems."""
__version__ = "0.1.0"

from .core import Ball, Box, Domain, JointPoint, LossSpec, best_response, gap_value, regularize, saddle_operator
from .estimators import LocalDPSGDASaddle, NoisySGDASaddle, RecursiveRegularizationSaddle, RegularizedSaddle
from .evaluation import (
    GapReport,
    StabilityReport,
    empirical_gap,
    gap_at_point,
    separation_check,
    strong_gap_mc,
    uas_probe,
    variance_probe,
    weak_gap_mc,
)
from .privacy import PrivacyBudget, PrivacyPreconditionError, calibrate_noisy_sgda, compose_parallel
from .problems import Dataset, ProblemSpec, make_problem, mode_algorithm, population_best_response, sample_dataset
from .solvers import find_saddle, local_dp_sgda, noisy_sgda, recursive_regularization, sgda
