"""
Experiment configuration.

One JSON file describes a whole experiment:
- the network (named architecture or an explicit layer table)
- the dataset file(s) and how they split into retrain/eval/test
- from-scratch training settings
- pruning-harness settings
- the signals to run

Unknown keys are rejected. Relative paths resolve against the directory
of the config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from prunetax.core.network import LayerSpec, LossKind
from prunetax.core.signals import SignalSpec, TapPoint, resolve_signals
from prunetax.core.storage import atomic_write_text


class TrainingConfig(BaseModel):
    """SGD with momentum from scratch."""

    model_config = ConfigDict(extra="forbid")

    steps: int = Field(default=2000, ge=1, description="Optimizer steps")
    batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    log_every: int = Field(default=100, ge=1, description="Steps between loss log lines")


class HarnessConfig(BaseModel):
    """Settings of one pruning run."""

    model_config = ConfigDict(extra="forbid")

    train_acc_recovery_target: Optional[float] = Field(
        default=None, gt=0, le=1,
        description="Retrain until train accuracy reaches this; None derives it from the initial accuracy",
    )
    recovery_margin: float = Field(
        default=0.005, ge=0, le=1,
        description="Derived target = initial train accuracy - margin",
    )
    max_retrain_steps_per_iteration: int = Field(default=50, ge=0)
    retrain_batch_size: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    recovery_check_every: int = Field(
        default=1, ge=1,
        description="Retrain steps between accuracy checks; above 1 the recorded steps round up to a multiple",
    )
    stop_test_acc_drop: float = Field(default=0.05, ge=0, le=1)
    operating_drop: float = Field(default=0.01, ge=0, le=1, description="Drop defining the reported operating point")
    eval_batches_for_saliency: int = Field(default=8, ge=1)
    eval_batch_size: int = Field(default=64, ge=1)
    train_eval_samples: int = Field(default=1024, ge=1, description="Retrain-split samples used to monitor train accuracy")
    tap_point: TapPoint = TapPoint.POST_NONLINEARITY
    seed: int = 0


class SplitConfig(BaseModel):
    """Fractions of the dataset file assigned to each split, in file order after shuffling."""

    model_config = ConfigDict(extra="forbid")

    retrain: float = Field(default=0.7, ge=0, le=1)
    eval: float = Field(default=0.1, ge=0, le=1)
    test: float = Field(default=0.2, ge=0, le=1)

    @model_validator(mode="after")
    def _check_total(self) -> SplitConfig:
        if self.retrain + self.eval + self.test > 1.0 + 1e-9:
            raise ValueError("split fractions sum to more than 1")
        if self.retrain <= 0 or self.eval <= 0:
            raise ValueError("retrain and eval splits must be nonempty")
        return self


class ExperimentConfig(BaseModel):
    """Root of the experiment config file."""

    model_config = ConfigDict(extra="forbid")

    architecture: str = "lenet5-like"
    layers: Optional[list[LayerSpec]] = Field(default=None, description="Explicit layer table; overrides architecture")
    input_shape: Optional[tuple[int, int, int]] = None
    num_classes: int = Field(default=10, ge=2)
    loss: LossKind = LossKind.SOFTMAX_XENT

    dataset_path: Path
    test_path: Optional[Path] = Field(default=None, description="Separate test file; the split's test fraction is then unused")
    split: SplitConfig = Field(default_factory=SplitConfig)

    training: TrainingConfig = Field(default_factory=TrainingConfig)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)
    signals: list[str] = Field(default_factory=lambda: ["all"])

    output_dir: Path = Path("runs")
    checkpoint_path: Optional[Path] = None
    seed: int = 0
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        if self.layers is not None and self.input_shape is None:
            raise ValueError("an explicit layer table needs input_shape")
        if self.test_path is None and self.split.test <= 0:
            raise ValueError("no test data: set split.test > 0 or test_path")
        resolve_signals(self.signals)
        return self

    def signal_specs(self) -> list[SignalSpec]:
        return resolve_signals(self.signals)

    @property
    def checkpoint(self) -> Path:
        return self.checkpoint_path or self.output_dir / "model.prnw"

    def resolve_paths(self, base: Path) -> ExperimentConfig:
        """Copy with relative paths anchored at `base`."""
        def anchor(p: Optional[Path]) -> Optional[Path]:
            if p is None or p.is_absolute():
                return p
            return base / p

        return self.model_copy(update={
            "dataset_path": anchor(self.dataset_path),
            "test_path": anchor(self.test_path),
            "output_dir": anchor(self.output_dir),
            "checkpoint_path": anchor(self.checkpoint_path),
        })

    def save(self, path: Path) -> None:
        atomic_write_text(path, self.model_dump_json(indent=2), prefix="config_")

    @classmethod
    def load(cls, path: Path) -> ExperimentConfig:
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls.model_validate(data).resolve_paths(path.parent)
