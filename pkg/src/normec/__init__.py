"""Smoothed normalization with error compensation for private distributed optimization."""

from normec.algorithms import ALGORITHMS, AlgoConfig, DivergenceError, GradAtX0Perturbed, RunTrace, ZeroMemory, run, run_safely
from normec.operators import Clip, SmoothedNormalize, StandardNormalize, TopK, clip, smoothed_normalize
from normec.problems import LogisticProblem, QuadraticProblem, make_counterexample, make_logistic, make_random_quadratic

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "AlgoConfig",
    "Clip",
    "DivergenceError",
    "GradAtX0Perturbed",
    "LogisticProblem",
    "QuadraticProblem",
    "RunTrace",
    "SmoothedNormalize",
    "StandardNormalize",
    "TopK",
    "ZeroMemory",
    "clip",
    "make_counterexample",
    "make_logistic",
    "make_random_quadratic",
    "run",
    "run_safely",
    "smoothed_normalize",
]
