"""Taylor and out-of-distribution-risk filter pruning on a numpy autodiff engine."""

__version__ = "0.1.0"

from .config import ExperimentConfig, PretrainConfig, PruningConfig, load_config
from .domains import Dataset, DomainBatch, SplitPlan, SyntheticSpec, generate, load_dataset, save_dataset, split
from .exceptions import DGPruneError
from .importance import (
    ImportanceTable,
    IoRConfig,
    exact_importance,
    ior_importance,
    ood_risk_variance,
    per_domain_risks,
    taylor_importance,
)
from .nn import ArchConfig, FilterId, GatedModel, build_model, load_checkpoint, save_checkpoint
from .pruning import PruneSchedule, prune_finetune_loop

__all__ = [
    "ArchConfig", "DGPruneError", "Dataset", "DomainBatch", "ExperimentConfig", "FilterId", "GatedModel",
    "ImportanceTable", "IoRConfig", "PretrainConfig", "PruneSchedule", "PruningConfig", "SplitPlan",
    "SyntheticSpec", "build_model", "exact_importance", "generate", "ior_importance", "load_checkpoint",
    "load_config", "load_dataset", "ood_risk_variance", "per_domain_risks", "prune_finetune_loop",
    "save_checkpoint", "save_dataset", "split", "taylor_importance",
]
