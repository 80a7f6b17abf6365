"""Covariate adjustment-set selection from multiple environments, with AIPW estimation."""

__version__ = "0.1.0"

from .estimator import AteReport, aipw_ate, baseline, estimate, mae
from .invariance import LossTable, cross_u_statistic, objective
from .relax import TrainConfig, gumbel_select, hyperparameter_sweep
from .scm import KnownDagScenario, MultiEnvDataset, sample_known_dag
from .search import SelectionResult, combinatorial_select

__all__ = [
    "AteReport", "KnownDagScenario", "LossTable", "MultiEnvDataset", "SelectionResult",
    "TrainConfig", "aipw_ate", "baseline", "combinatorial_select", "cross_u_statistic",
    "estimate", "gumbel_select", "hyperparameter_sweep", "mae", "objective", "sample_known_dag",
]
