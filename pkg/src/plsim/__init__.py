"""Partially linear single-index models for longitudinal data.

Bias-corrected GEE and QIF estimation, SCAD variable selection tuned by BIC,
and a replication harness for simulation studies.
"""

from .core import (
    DataFormatError,
    DomainError,
    FitResult,
    IndexParam,
    LongitudinalDataset,
    Subject,
    ThetaParam,
    read_dataset,
    write_dataset,
)
from .correlation import CorrelationKind, WorkingCovariance, estimate_working_covariance
from .gee import GeeConfig, solve_gee
from .kernel import KernelConfig, estimate_g, local_linear_weights, select_bandwidth
from .qif import solve_qif
from .selection import PenaltyConfig, SelectionResult, penalized_gee_solve, penalized_qif_solve, tune_lambdas
from .simulation import MetricsReport, SimDesign, StudyConfig, generate_dataset, run_replications

__version__ = "0.1.0"

__all__ = [
    "CorrelationKind",
    "DataFormatError",
    "DomainError",
    "FitResult",
    "GeeConfig",
    "IndexParam",
    "KernelConfig",
    "LongitudinalDataset",
    "MetricsReport",
    "PenaltyConfig",
    "SelectionResult",
    "SimDesign",
    "StudyConfig",
    "Subject",
    "ThetaParam",
    "WorkingCovariance",
    "estimate_g",
    "estimate_working_covariance",
    "generate_dataset",
    "local_linear_weights",
    "penalized_gee_solve",
    "penalized_qif_solve",
    "read_dataset",
    "run_replications",
    "select_bandwidth",
    "solve_gee",
    "solve_qif",
    "tune_lambdas",
    "write_dataset",
]
