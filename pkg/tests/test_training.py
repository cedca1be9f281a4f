"""
Unit tests for SGD training and masked retraining.
"""

import numpy as np
import pytest

from prunetax.core.config import HarnessConfig, TrainingConfig
from prunetax.core.engine import accuracy
from prunetax.core.mask import PruneMask
from prunetax.core.network import LayerKind, LayerSpec, build_network
from prunetax.services.datasets import make_separable_dataset
from prunetax.services.pruning import prune_channel
from prunetax.services import training
from prunetax.services.training import SGDMomentum, retrain_until, train

from conftest import make_tiny_net


def linear_classifier():
    layers = [LayerSpec(kind=LayerKind.DENSE, name="fc", in_channels=16, out_channels=2)]
    return build_network(layers, (16, 1, 1), seed=0, dtype=np.float64)


class TestTrain:
    """Tests for from-scratch training."""

    def test_separable_set_is_learned(self):
        """A linear classifier fits a separable two-class set."""
        data = make_separable_dataset(400, shape=(16, 1, 1), margin=2.0, seed=1).astype(np.float64)
        net = linear_classifier()
        config = TrainingConfig(steps=600, batch_size=32, learning_rate=0.01, weight_decay=0.0, log_every=100)
        report = train(net, data, config, seed=0)
        assert accuracy(net, data.batches(100)) >= 0.99
        assert report.steps == 600
        assert [step for step, _ in report.loss_curve] == [100, 200, 300, 400, 500, 600]
        assert report.loss_curve[-1][1] < report.loss_curve[0][1]

    def test_same_seed_same_parameters(self, tiny_splits):
        """Training is deterministic per seed."""
        config = TrainingConfig(steps=20, batch_size=8, log_every=10)
        a, b = make_tiny_net(0), make_tiny_net(0)
        train(a, tiny_splits.retrain, config, seed=4)
        train(b, tiny_splits.retrain, config, seed=4)
        for index in a.parametric_layers():
            assert a.params[index].weight.tobytes() == b.params[index].weight.tobytes()

    def test_log_callback(self, tiny_splits):
        """on_log receives (step, mean loss) at each log interval."""
        seen = []
        train(make_tiny_net(0), tiny_splits.retrain, TrainingConfig(steps=6, batch_size=8, log_every=3), on_log=lambda step, loss: seen.append(step))
        assert seen == [3, 6]


class TestSGDMomentum:
    """Tests for the optimizer."""

    def test_plain_step_descends(self):
        """One step with momentum 0 moves against the gradient."""
        data = make_separable_dataset(64, shape=(16, 1, 1), seed=2).astype(np.float64)
        net = linear_classifier()
        batch = next(data.batches(64))
        optimizer = SGDMomentum(0.1, momentum=0.0)
        first = optimizer.step(net, batch)
        second = optimizer.step(net, batch)
        assert second < first

    def test_masked_velocity_is_zero(self, tiny_splits):
        """Velocity at masked positions stays exactly zero."""
        net = make_tiny_net(0)
        mask = PruneMask.empty(net)
        prune_channel(net, mask, (0, 0))
        optimizer = SGDMomentum(0.05, 0.9, mask=mask)
        rng = np.random.default_rng(1)
        for _ in range(3):
            optimizer.step(net, tiny_splits.retrain.sample_batch(rng, 8))
        assert np.all(optimizer.velocity["w0"][0] == 0)
        assert optimizer.velocity["b0"][0] == 0
        assert np.all(optimizer.velocity["w3"][:, 0] == 0)


class TestRetrainUntil:
    """Tests for the recovery loop."""

    def test_reached_target_takes_no_steps(self, tiny_splits):
        """A target already met costs nothing."""
        net = make_tiny_net(0)
        steps, acc = retrain_until(
            net, PruneMask.empty(net), tiny_splits.retrain, tiny_splits.retrain, 0.0,
            max_steps=10, batch_size=8, learning_rate=0.01, momentum=0.9, rng=np.random.default_rng(0),
        )
        assert steps == 0
        assert acc == pytest.approx(accuracy(net, tiny_splits.retrain.batches(8)))

    def test_budget_caps_steps(self, tiny_splits):
        """An unreachable target stops at the budget."""
        net = make_tiny_net(0)
        steps, _ = retrain_until(
            net, PruneMask.empty(net), tiny_splits.retrain, tiny_splits.retrain, 1.01,
            max_steps=7, batch_size=8, learning_rate=0.01, momentum=0.9,
            rng=np.random.default_rng(0), check_every=3,
        )
        assert steps == 7

    def test_default_interval_counts_exact_steps(self, tiny_splits, monkeypatch):
        """Recovery on the second step records 2, not a rounded-up check interval."""
        readings = iter([0.0, 0.5, 0.95])
        monkeypatch.setattr(training, "accuracy", lambda net, batches: next(readings))
        net = make_tiny_net(0)
        steps, acc = retrain_until(
            net, PruneMask.empty(net), tiny_splits.retrain, tiny_splits.retrain, 0.9,
            max_steps=50, batch_size=8, learning_rate=0.01, momentum=0.9,
            rng=np.random.default_rng(0), check_every=HarnessConfig().recovery_check_every,
        )
        assert (steps, acc) == (2, 0.95)
