"""Robust M-estimation (MLE and minimum density power divergence) for linear
and logistic mixed models, with a simulation harness and diagnostics."""

from .core import (CovStructure, EstimatorKind, EstimatorSpec, Family, FitResult,
                   GroupedDataset, ModelSpec, ParameterPoint, read_dataset_csv,
                   write_dataset_csv)
from .errors import RobustGLMMError
from .experiments import (Contamination, FitSettings, SimConfig, contaminate,
                          fit_convergence_rate, run_consistency_experiment, simulate,
                          simulate_lmm, simulate_logistic, tail_decay_experiment)
from .lmm import fit_lmm, lmm_mdpde_loss, lmm_mle_loss
from .logistic import fit_logistic, gh_rule, logistic_mdpde_loss, logistic_mle_loss
from .optimize import OptimizerOptions, minimize

__version__ = "0.1.0"

__all__ = [
    "CovStructure", "EstimatorKind", "EstimatorSpec", "Family", "FitResult",
    "GroupedDataset", "ModelSpec", "ParameterPoint", "read_dataset_csv",
    "write_dataset_csv", "RobustGLMMError", "Contamination", "FitSettings",
    "SimConfig", "contaminate", "fit_convergence_rate", "run_consistency_experiment",
    "simulate", "simulate_lmm", "simulate_logistic", "tail_decay_experiment",
    "fit_lmm", "lmm_mdpde_loss", "lmm_mle_loss", "fit_logistic", "gh_rule",
    "logistic_mdpde_loss", "logistic_mle_loss", "OptimizerOptions", "minimize",
]
