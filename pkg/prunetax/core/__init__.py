"""Core modules for prunetax."""

from .errors import (
    PruneTaxError, ShapeMismatchError, NonFiniteError, MissingDerivativeError,
    UnsupportedLayerError, DoublePruneError, NoPrunableChannelError,
    DatasetFormatError, CheckpointFormatError, UnknownSignalError, PruningStepError,
)
from .network import LayerKind, LayerSpec, LossKind, NetworkGraph, Batch, build_network, get_architecture
from .engine import ActivationRecord, BatchAccumulator, forward, backward, hessian_diag_app1, hessian_diag_app2, evaluate
from .signals import SignalSpec, TapPoint, enumerate_signals, published_signal, resolve_signal
from .mask import PruneMask
from .config import ExperimentConfig, HarnessConfig, SplitConfig, TrainingConfig
from .records import ExperimentRecord, ResultRow, SummaryRow

__all__ = [
    "PruneTaxError", "ShapeMismatchError", "NonFiniteError", "MissingDerivativeError",
    "UnsupportedLayerError", "DoublePruneError", "NoPrunableChannelError",
    "DatasetFormatError", "CheckpointFormatError", "UnknownSignalError", "PruningStepError",
    "LayerKind", "LayerSpec", "LossKind", "NetworkGraph", "Batch", "build_network", "get_architecture",
    "ActivationRecord", "BatchAccumulator", "forward", "backward",
    "hessian_diag_app1", "hessian_diag_app2", "evaluate",
    "SignalSpec", "TapPoint", "enumerate_signals", "published_signal", "resolve_signal",
    "PruneMask",
    "ExperimentConfig", "HarnessConfig", "SplitConfig", "TrainingConfig",
    "ExperimentRecord", "ResultRow", "SummaryRow",
]
