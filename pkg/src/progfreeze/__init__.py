"""Progressive layer freezing, linear probing and a federated simulator on a miniature residual net."""

__version__ = "0.1.0"

from .cohort import Cohort, Domain, generate_cohort
from .freeze import FreezePlan, Mode, make_plan
from .metrics import MetricsReport, auroc, evaluate, paired_t
from .nnet import ArchConfig, Network, init_network
from .splitter import FoldPlan, audit, make_folds
from .trainer import Init, TrainConfig, default_grid, run_ablation, run_config, train_fold

__all__ = [
    "ArchConfig", "Cohort", "Domain", "FoldPlan", "FreezePlan", "Init", "MetricsReport", "Mode",
    "Network", "TrainConfig", "audit", "auroc", "default_grid", "evaluate", "generate_cohort",
    "init_network", "make_folds", "make_plan", "paired_t", "run_ablation", "run_config",
    "train_fold",
]
