"""
Unit tests for experiment configuration files.
"""

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from prunetax.core.config import ExperimentConfig, HarnessConfig, SplitConfig
from prunetax.core.errors import UnknownSignalError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, **fields) -> Path:
    data = {"dataset_path": "data.prnd", **fields}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


class TestExperimentConfig:
    """Tests for loading and validating ExperimentConfig."""

    @pytest.mark.parametrize("name", ["lenet5_templates.json", "cifar10_quick_templates.json"])
    def test_shipped_configs_load(self, name):
        """The configs in configs/ are valid."""
        config = ExperimentConfig.load(CONFIGS / name)
        assert config.signal_specs()
        assert config.dataset_path.is_absolute()

    def test_relative_paths_anchor_at_file(self, tmp_path):
        """Relative paths resolve against the config's directory."""
        config = ExperimentConfig.load(write(tmp_path, output_dir="out"))
        assert config.dataset_path == tmp_path / "data.prnd"
        assert config.checkpoint == tmp_path / "out" / "model.prnw"

    def test_defaults(self, tmp_path):
        """Harness defaults: 5% stop, 1% operating point, 8 batches of 64, exact recovery steps."""
        harness = ExperimentConfig.load(write(tmp_path)).harness
        assert harness.stop_test_acc_drop == 0.05
        assert harness.operating_drop == 0.01
        assert (harness.eval_batches_for_saliency, harness.eval_batch_size) == (8, 64)
        assert harness.recovery_check_every == 1

    def test_unknown_key_rejected(self, tmp_path):
        """Typos in keys are errors."""
        with pytest.raises(ValidationError):
            ExperimentConfig.load(write(tmp_path, seeed=1))

    def test_layers_need_input_shape(self, tmp_path):
        """An explicit layer table without input_shape is rejected."""
        with pytest.raises(ValidationError):
            ExperimentConfig.load(write(tmp_path, layers=[{"kind": "relu"}]))

    def test_unknown_signal(self, tmp_path):
        """Signal selections are checked on load."""
        with pytest.raises(UnknownSignalError):
            ExperimentConfig.load(write(tmp_path, signals=["weights.value.l3.none"]))

    def test_save_and_load(self, tmp_path):
        """A saved config loads back unchanged."""
        config = ExperimentConfig.load(write(tmp_path, seed=9, signals=["published"]))
        config.save(tmp_path / "saved.json")
        assert ExperimentConfig.load(tmp_path / "saved.json") == config


class TestSplitConfig:
    """Tests for split fractions."""

    def test_oversubscribed(self):
        """Fractions may not exceed 1."""
        with pytest.raises(ValidationError):
            SplitConfig(retrain=0.8, eval=0.2, test=0.2)

    def test_empty_eval(self):
        """The eval split feeds saliency and must be nonempty."""
        with pytest.raises(ValidationError):
            SplitConfig(eval=0.0)

    def test_harness_ranges(self):
        """A negative retraining budget is invalid."""
        with pytest.raises(ValidationError):
            HarnessConfig(max_retrain_steps_per_iteration=-1)
