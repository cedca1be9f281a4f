"""
Unit tests for masking, sparsity accounting and the pruning loop.
"""

import numpy as np
import pytest

from prunetax.core.config import HarnessConfig
from prunetax.core.engine import forward
from prunetax.core.errors import DoublePruneError, NonFiniteError, NoPrunableChannelError, PruningStepError
from prunetax.core.mask import PruneMask
from prunetax.core.network import LayerKind, LayerSpec, LossKind, build_network
from prunetax.core.signals import SignalSpec
from prunetax.services.pruning import (
    PruningSession,
    count_parameters,
    prune_channel,
    run_prune_no_retrain,
    run_prune_with_retrain,
    select_least_salient,
    sparsity,
)
from prunetax.services import pruning
from prunetax.services.saliency import SaliencyMap
from prunetax.services.training import SGDMomentum

from conftest import make_batch, make_splits, make_tiny_net

L1 = SignalSpec.from_id("weights.value.l1.none")


def two_conv_net(k: int = 3):
    """(2, 5, 5) -> conv 2->3 -> relu -> conv 3->2, same padding."""
    layers = [
        LayerSpec(kind=LayerKind.CONV, name="a", in_channels=2, out_channels=3, kernel=k, pad=k // 2),
        LayerSpec(kind=LayerKind.RELU),
        LayerSpec(kind=LayerKind.CONV, name="b", in_channels=3, out_channels=2, kernel=k, pad=k // 2),
    ]
    return build_network(layers, (2, 5, 5), seed=0, loss_kind=LossKind.MSE, dtype=np.float64)


def map_of(values: dict[int, list[float]], mask: PruneMask) -> SaliencyMap:
    saliency = {layer: np.array(v, dtype=np.float64) for layer, v in values.items()}
    return SaliencyMap(
        spec=L1,
        reduced=saliency,
        denominators={layer: np.ones_like(v) for layer, v in saliency.items()},
        saliency=saliency,
        excluded={layer: mask.pruned[layer].copy() for layer in saliency},
    )


def harness(**overrides) -> HarnessConfig:
    settings = dict(
        stop_test_acc_drop=1.0,
        eval_batches_for_saliency=2,
        eval_batch_size=16,
        train_eval_samples=32,
        max_retrain_steps_per_iteration=3,
        retrain_batch_size=8,
        recovery_check_every=1,
        seed=5,
    )
    settings.update(overrides)
    return HarnessConfig(**settings)


class TestPruneChannel:
    """Tests for removing one channel."""

    def test_hand_parameter_count(self):
        """2->3->2 with k=3: filter 2k^2, bias 1 and consumer slice 2k^2."""
        net = two_conv_net(3)
        mask = PruneMask.empty(net)
        before = count_parameters(net, mask)["parameters_remaining"]
        prune_channel(net, mask, (0, 1))
        after = count_parameters(net, mask)["parameters_remaining"]
        assert before - after == 2 * 9 + 2 * 9 + 1
        assert np.all(net.params[0].weight[1] == 0)
        assert net.params[0].bias[1] == 0
        assert np.all(net.params[2].weight[:, 1] == 0)

    def test_zero_channel_leaves_loss_unchanged(self, tiny_batch):
        """Removing a channel that is already all zero changes nothing."""
        net = make_tiny_net(0)
        net.params[0].weight[0] = 0
        net.params[0].bias[0] = 0
        before = forward(net, tiny_batch).loss
        prune_channel(net, PruneMask.empty(net), (0, 0))
        assert forward(net, tiny_batch).loss == before

    def test_double_prune(self, tiny_net):
        """The same channel cannot be removed twice."""
        mask = PruneMask.empty(tiny_net)
        prune_channel(tiny_net, mask, (0, 2))
        with pytest.raises(DoublePruneError):
            prune_channel(tiny_net, mask, (0, 2))

    def test_flatten_consumer_slice(self, tiny_net):
        """A conv feeding a dense layer zeroes its h*w input columns."""
        mask = PruneMask.empty(tiny_net)
        prune_channel(tiny_net, mask, (3, 1))
        assert np.all(tiny_net.params[6].weight[:, 1] == 0)
        assert np.any(tiny_net.params[6].weight[:, 0] != 0)


class TestMaskSoundness:
    """Forward outputs ignore whatever sits at masked positions."""

    def _random_mask(self, net, rng) -> PruneMask:
        mask = PruneMask.empty(net)
        for layer in net.prunable_layers():
            mask.pruned[layer] = rng.random(mask.pruned[layer].size) < 0.4
        mask.apply(net)
        return mask

    def test_removed_filters_are_ignored(self):
        """200 random masks; garbage in removed filters and biases does not reach the output."""
        rng = np.random.default_rng(11)
        batch = make_batch(3, n=6)
        for trial in range(200):
            net = make_tiny_net(trial % 5)
            mask = self._random_mask(net, rng)
            clean = forward(net, batch).activations[-1]
            for layer in net.prunable_layers():
                p = net.params[layer]
                out = mask.output_mask(net, layer)
                p.weight[out] = rng.standard_normal(p.weight[out].shape)
                p.bias[out] = rng.standard_normal(int(out.sum()))
            noisy = forward(net, batch).activations[-1]
            np.testing.assert_allclose(noisy, clean, rtol=1e-12, atol=1e-12, err_msg=f"trial {trial}")

    def test_removed_input_slices_are_ignored(self):
        """200 random masks; garbage in consumer slices of removed channels does not reach the output."""
        rng = np.random.default_rng(12)
        batch = make_batch(4, n=6)
        for trial in range(200):
            net = make_tiny_net(trial % 5)
            mask = self._random_mask(net, rng)
            clean = forward(net, batch).activations[-1]
            for layer in net.parametric_layers():
                p = net.params[layer]
                cols = mask.input_mask(net, layer)
                p.weight[:, cols] = rng.standard_normal(p.weight[:, cols].shape)
            noisy = forward(net, batch).activations[-1]
            np.testing.assert_allclose(noisy, clean, rtol=1e-12, atol=1e-12, err_msg=f"trial {trial}")

    def test_reapplying_mask_restores_outputs(self, tiny_batch):
        """Perturbing every masked weight and re-masking gives the same outputs."""
        rng = np.random.default_rng(13)
        net = make_tiny_net(1)
        mask = self._random_mask(net, rng)
        clean = forward(net, tiny_batch).activations[-1]
        for layer in net.parametric_layers():
            positions = mask.weight_mask(net, layer)
            net.params[layer].weight[positions] = 7.0
        mask.apply(net)
        np.testing.assert_array_equal(forward(net, tiny_batch).activations[-1], clean)

    def test_retraining_keeps_masked_weights_zero(self, tiny_splits):
        """SGD with a mask never moves masked weights."""
        net = make_tiny_net(2)
        mask = PruneMask.empty(net)
        prune_channel(net, mask, (0, 1))
        prune_channel(net, mask, (3, 0))
        before = {i: p.weight.copy() for i, p in net.params.items()}
        optimizer = SGDMomentum(0.05, 0.9, mask=mask)
        rng = np.random.default_rng(0)
        for _ in range(10):
            optimizer.step(net, tiny_splits.retrain.sample_batch(rng, 16))
        for layer in net.parametric_layers():
            masked = mask.weight_mask(net, layer)
            assert np.all(net.params[layer].weight[masked] == 0)
        assert not np.array_equal(before[0], net.params[0].weight)


class TestSparsity:
    """Tests for conv sparsity."""

    def test_empty_mask(self):
        """No removal, no sparsity."""
        net = two_conv_net()
        assert sparsity(net, PruneMask.empty(net)) == 0.0

    def test_everything_removed(self):
        """All channels of all layers removed gives 1."""
        net = two_conv_net()
        mask = PruneMask.empty(net)
        for layer in mask.pruned:
            mask.pruned[layer][:] = True
        assert sparsity(net, mask) == 1.0

    def test_hand_ratio(self):
        """One of three middle channels: (18 + 18) / (54 + 54)."""
        net = two_conv_net()
        mask = prune_channel(net, PruneMask.empty(net), (0, 1))
        assert sparsity(net, mask) == pytest.approx(1 / 3)


class TestSelectLeastSalient:
    """Tests for the global argmin."""

    def _mask(self) -> PruneMask:
        return PruneMask({0: np.zeros(2, dtype=bool), 1: np.zeros(2, dtype=bool)})

    def test_argmin(self):
        """S = {(0,0):1, (0,1):-2, (1,0):0, (1,1):3} picks (0,1)."""
        mask = self._mask()
        assert select_least_salient(map_of({0: [1, -2], 1: [0, 3]}, mask), mask) == (0, 1)

    def test_ties_go_to_lowest_index(self):
        """Equal saliencies pick (0,0)."""
        mask = self._mask()
        assert select_least_salient(map_of({0: [1, 1], 1: [1, 1]}, mask), mask) == (0, 0)

    def test_last_channel_skipped(self):
        """A layer down to one channel is skipped even when it is minimal."""
        mask = self._mask()
        mask.pruned[0][0] = True
        assert select_least_salient(map_of({0: [0, -5], 1: [0, 3]}, mask), mask) == (1, 0)

    def test_nothing_left(self):
        """Every layer at its last channel is terminal."""
        mask = self._mask()
        mask.pruned[0][0] = True
        mask.pruned[1][1] = True
        with pytest.raises(NoPrunableChannelError):
            select_least_salient(map_of({0: [0, 1], 1: [2, 0]}, mask), mask)

    def test_nan_entries_skipped(self):
        """NaN channels are passed over; the finite minimum still wins."""
        mask = self._mask()
        nan = float("nan")
        assert select_least_salient(map_of({0: [nan, 4], 1: [nan, 2]}, mask), mask) == (1, 1)

    def test_all_nan_is_an_error(self):
        """A map that is NaN for every candidate is not mistaken for a finished run."""
        mask = self._mask()
        nan = float("nan")
        with pytest.raises(NonFiniteError):
            select_least_salient(map_of({0: [nan, nan], 1: [nan, nan]}, mask), mask)

    def test_all_nan_fails_the_run(self, tiny_splits, monkeypatch):
        """An all-NaN map stops the session with a step error instead of a clean stop."""
        def nan_saliency(net, spec, batches, mask, tap_point=None):
            values = {l: np.full(net.layers[l].out_channels, np.nan) for l in net.prunable_layers()}
            return map_of(values, mask)

        monkeypatch.setattr(pruning, "evaluate_saliency", nan_saliency)
        session = PruningSession(make_tiny_net(0), L1, tiny_splits, harness(), retrain=False)
        with pytest.raises(PruningStepError) as info:
            session.run()
        assert isinstance(info.value.__cause__, NonFiniteError)
        assert session.stop_reason == ""


class TestPruningRuns:
    """Tests for the two pruning loops."""

    def _hand_ranked_net(self):
        net = make_tiny_net(0)
        for channel, l1 in enumerate([5.0, 1.0, 3.0]):
            net.params[0].weight[channel] = l1 / 9
        net.params[3].weight[0] = 1.0
        net.params[3].weight[1] = 0.1
        return net

    def test_l1_order(self, tiny_splits):
        """Weight-L1 pruning follows the hand ranking, recomputed after each removal."""
        # conv1 L1 = [5, 1, 3]; conv2 L1 = [12, 1.2], dropping to [8, 0.8] once conv1 channel 1 is gone
        records = run_prune_no_retrain(self._hand_ranked_net(), L1, tiny_splits, harness())
        assert [(r.pruned_layer, r.pruned_channel) for r in records] == [(0, 1), (3, 1), (0, 2)]
        assert records[0].saliency == pytest.approx(1.0)
        assert records[1].saliency == pytest.approx(0.8)

    def test_runs_until_last_channels(self, tiny_splits):
        """Without a drop limit the run ends with one channel per layer."""
        session = PruningSession(make_tiny_net(1), L1, tiny_splits, harness(), retrain=False)
        records = session.run()
        assert len(records) == 3
        assert session.stop_reason == "no prunable channel left"
        for layer in session.net.prunable_layers():
            assert session.mask.unpruned_count(layer) == 1

    def test_input_network_untouched(self, tiny_splits):
        """The caller's network keeps its parameters."""
        net = make_tiny_net(1)
        original = net.params[0].weight.copy()
        run_prune_no_retrain(net, L1, tiny_splits, harness())
        np.testing.assert_array_equal(net.params[0].weight, original)

    def test_sparsity_increases_by_channel_weight(self, tiny_splits):
        """Each step adds exactly the removed channel's masked weights."""
        session = PruningSession(make_tiny_net(3), SignalSpec.from_id("activations.value.l2.none"), tiny_splits, harness(), retrain=False)
        records = session.run()
        total = session.net.conv_weight_count()
        replay = PruneMask.empty(session.net)
        previous = 0.0
        for record in records:
            replay.mark(session.net, record.pruned_layer, record.pruned_channel)
            assert record.sparsity > previous
            assert record.sparsity == pytest.approx(replay.masked_conv_weights(session.net) / total)
            previous = record.sparsity

    def test_zero_drop_stops_at_first_loss(self, tiny_splits):
        """With stop_test_acc_drop = 0 the run ends at the first step losing test accuracy."""
        session = PruningSession(make_tiny_net(4), L1, tiny_splits, harness(stop_test_acc_drop=0.0), retrain=False)
        records = session.run()
        for record in records[:-1]:
            assert session.initial_test_acc - record.test_acc <= 0
        if session.stop_reason == "test accuracy drop":
            assert session.initial_test_acc - records[-1].test_acc > 0

    def test_zero_retrain_budget_matches_no_retrain(self, tiny_splits):
        """max_retrain_steps_per_iteration = 0 reproduces the no-retrain run."""
        spec = SignalSpec.from_id("activations.taylor1.abs_of_sum.cardinality")
        plain = run_prune_no_retrain(make_tiny_net(2), spec, tiny_splits, harness())
        budgetless = run_prune_with_retrain(make_tiny_net(2), spec, tiny_splits, harness(max_retrain_steps_per_iteration=0))
        assert [r.model_dump() for r in plain] == [r.model_dump() for r in budgetless]

    def test_retrain_steps_bounded(self, tiny_splits):
        """No iteration spends more than the configured retraining budget."""
        records = run_prune_with_retrain(
            make_tiny_net(2), L1, tiny_splits, harness(train_acc_recovery_target=1.0),
        )
        assert all(r.retrain_steps <= 3 for r in records)
        assert records[-1].cumulative_retrain_steps == sum(r.retrain_steps for r in records)

    def test_same_seed_same_records(self, tiny_splits):
        """A run is a pure function of its inputs and seed."""
        spec = SignalSpec.from_id("activations.taylor2_full.app2.l2.none")
        a = run_prune_with_retrain(make_tiny_net(6), spec, tiny_splits, harness())
        b = run_prune_with_retrain(make_tiny_net(6), spec, tiny_splits, harness())
        assert [r.model_dump() for r in a] == [r.model_dump() for r in b]

    def test_step_errors_carry_index(self):
        """Errors inside an iteration are wrapped with the step index."""
        bad = make_splits(0, classes=5)
        with pytest.raises(PruningStepError) as info:
            run_prune_no_retrain(make_tiny_net(0), SignalSpec.from_id("weights.gradient.l1.none"), bad, harness())
        assert info.value.step == 0
