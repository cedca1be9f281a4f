"""Services for prunetax."""

from .datasets import LabelledData, DataSplits, read_dataset, write_dataset, make_dataset, split_indices
from .checkpoint import save_checkpoint, load_checkpoint
from .training import SGDMomentum, train
from .saliency import SaliencyMap, channel_saliency, evaluate_saliency
from .pruning import (
    PruningSession, prune_channel, sparsity, select_least_salient,
    run_prune_no_retrain, run_prune_with_retrain, count_parameters,
)
from .analysis import operating_point, pareto_front, compare_reductions, retrain_report, category_report
from .sweep import run_signal, run_sweep, signal_seed

__all__ = [
    "LabelledData", "DataSplits", "read_dataset", "write_dataset", "make_dataset", "split_indices",
    "save_checkpoint", "load_checkpoint",
    "SGDMomentum", "train",
    "SaliencyMap", "channel_saliency", "evaluate_saliency",
    "PruningSession", "prune_channel", "sparsity", "select_least_salient",
    "run_prune_no_retrain", "run_prune_with_retrain", "count_parameters",
    "operating_point", "pareto_front", "compare_reductions", "retrain_report", "category_report",
    "run_signal", "run_sweep", "signal_seed",
]
