"""Differentiable expert pruning for toy mixture-of-experts models."""

from .data import (
    CalibrationSet,
    RedundancyEntry,
    RedundancySpec,
    TaskSpec,
    TokenSet,
    gen_task,
    init_model,
    plant_redundancy,
    pretrain_toy,
)
from .estimators import (
    AdaptiveSkipper,
    DiEPPruner,
    ExhaustivePruner,
    FrequencyPruner,
    MoEClassifier,
    RandomPruner,
)
from .moe import ModelConfig, MoEModel, PruneMask, PruneParams, model_forward
from .pruning import (
    exhaustive_layer_search,
    frequency_prune,
    global_scores,
    merge_pruned,
    random_prune,
    select_bottom_k,
)
from .search import SearchConfig, run_search
from .skipping import SkipThresholds, calibrate, skip_forward

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSkipper",
    "CalibrationSet",
    "DiEPPruner",
    "ExhaustivePruner",
    "FrequencyPruner",
    "ModelConfig",
    "MoEClassifier",
    "MoEModel",
    "PruneMask",
    "PruneParams",
    "RandomPruner",
    "RedundancyEntry",
    "RedundancySpec",
    "SearchConfig",
    "SkipThresholds",
    "TaskSpec",
    "TokenSet",
    "calibrate",
    "exhaustive_layer_search",
    "frequency_prune",
    "gen_task",
    "global_scores",
    "init_model",
    "merge_pruned",
    "model_forward",
    "plant_redundancy",
    "pretrain_toy",
    "random_prune",
    "run_search",
    "select_bottom_k",
    "skip_forward",
]
