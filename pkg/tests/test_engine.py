"""
Unit tests for derivative propagation.

Gradients are checked against central finite differences in 64-bit;
app.1 against the exact Hessian diagonal where the model is quadratic.
"""

import numpy as np
import pytest

from prunetax.core.engine import (
    ActivationRecord,
    BatchAccumulator,
    accumulate,
    backward,
    evaluate,
    forward,
    hessian_diag_app1,
    hessian_diag_app2,
    loss_from,
    read_average,
)
from prunetax.core.errors import MissingDerivativeError, PruneTaxError, ShapeMismatchError
from prunetax.core.network import Batch, LayerKind, LayerSpec, LossKind, NetworkGraph, build_network

from conftest import make_batch, make_tiny_net

H = 1e-5


def _param_loss(net: NetworkGraph, batch: Batch, index: int, name: str, flat: int, value: float) -> float:
    p = net.params[index]
    tensor = p.weight if name == "weight" else p.bias
    old = tensor.reshape(-1)[flat]
    tensor.reshape(-1)[flat] = value
    try:
        return forward(net, batch).loss
    finally:
        tensor.reshape(-1)[flat] = old


def _relative(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), 1e-8)


def _smooth_positions(net: NetworkGraph, activation: np.ndarray, index: int) -> np.ndarray:
    """
    Positions where a +-H nudge stays on one linear piece of the consuming layer.

    ReLU inputs near 0 and max-pool windows with a (near) tied maximum are
    excluded: central differences average the two one-sided slopes there,
    while backprop follows the first maximal element.
    """
    smooth = np.ones(activation.shape, dtype=bool)
    if index >= len(net.layers):
        return smooth
    spec = net.layers[index]
    if spec.kind == LayerKind.RELU:
        smooth &= np.abs(activation) > 2 * H
    elif spec.kind == LayerKind.MAXPOOL:
        _, _, h, w = activation.shape
        k, s = spec.kernel, spec.stride
        for i in range(0, h - k + 1, s):
            for j in range(0, w - k + 1, s):
                window = activation[:, :, i:i + k, j:j + k]
                top = window.max(axis=(2, 3), keepdims=True)
                tied = (window >= top - 2 * H).sum(axis=(2, 3)) > 1
                smooth[:, :, i:i + k, j:j + k] &= ~tied[:, :, None, None]
    return smooth


class TestBackward:
    """Tests for first derivatives."""

    def test_relu_gradient(self):
        """ReLU input [-1, 2] with loss = sum of outputs gives [0, 1]."""
        layers = [
            LayerSpec(kind=LayerKind.DENSE, in_channels=2, out_channels=2, has_bias=False),
            LayerSpec(kind=LayerKind.RELU),
        ]
        net = NetworkGraph(layers, (2, 1, 1), loss_kind=LossKind.MSE, dtype=np.float64)
        net.set_params(0, np.eye(2).reshape(2, 2, 1, 1))
        x = np.array([[-1.0, 2.0]]).reshape(1, 2, 1, 1)
        record = forward(net, Batch(inputs=x, targets=np.zeros((1, 2))))
        # mse gradient is (y - t); overwrite it so the loss is sum(y)
        record.output_grad = np.ones_like(record.output_grad)
        backward(net, record)
        np.testing.assert_array_equal(record.act_grads[1].reshape(-1), [0.0, 1.0])

    def test_single_weight_gradient(self):
        """(w x - t)^2 / 2 at x=1, t=0, w=3 has dL/dw = 3."""
        layers = [LayerSpec(kind=LayerKind.DENSE, in_channels=1, out_channels=1, has_bias=False)]
        net = NetworkGraph(layers, (1, 1, 1), loss_kind=LossKind.MSE, dtype=np.float64)
        net.set_params(0, np.array([[[[3.0]]]]))
        record = backward(net, forward(net, Batch(inputs=np.ones((1, 1, 1, 1)), targets=np.zeros((1, 1)))))
        assert record.weight_grads[0].item() == pytest.approx(3.0)

    def test_requires_forward(self, tiny_net):
        """backward() without a forward record fails."""
        with pytest.raises(MissingDerivativeError):
            backward(tiny_net, ActivationRecord(activations=[], loss=0.0))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_parameter_gradients_match_finite_differences(self, seed):
        """Every weight and bias gradient matches central differences within 1e-4."""
        net = make_tiny_net(seed)
        batch = make_batch(seed)
        record = backward(net, forward(net, batch))
        for index in net.parametric_layers():
            for name, grads in (("weight", record.weight_grads), ("bias", record.bias_grads)):
                tensor = net.params[index].weight if name == "weight" else net.params[index].bias
                analytic = grads[index].reshape(-1)
                for flat in range(tensor.size):
                    base = tensor.reshape(-1)[flat]
                    numeric = (
                        _param_loss(net, batch, index, name, flat, base + H)
                        - _param_loss(net, batch, index, name, flat, base - H)
                    ) / (2 * H)
                    if abs(analytic[flat]) < 1e-6 and abs(numeric) < 1e-6:
                        continue
                    assert _relative(analytic[flat], numeric) < 1e-4, (index, name, flat)

    def test_tied_pool_window_routes_to_first_element(self):
        """An all-zero pool window sends dL/dx to its first element; only the right-sided slope agrees."""
        layers = [
            LayerSpec(kind=LayerKind.MAXPOOL, kernel=2, stride=2),
            LayerSpec(kind=LayerKind.FLATTEN),
            LayerSpec(kind=LayerKind.DENSE, in_channels=1, out_channels=1, has_bias=False),
        ]
        net = NetworkGraph(layers, (1, 2, 2), loss_kind=LossKind.MSE, dtype=np.float64)
        net.set_params(2, np.array([[[[2.0]]]]))
        batch = Batch(inputs=np.zeros((1, 1, 2, 2)), targets=np.ones((1, 1)))
        record = backward(net, forward(net, batch))
        np.testing.assert_allclose(record.act_grads[0].reshape(-1), [-2.0, 0.0, 0.0, 0.0])

        nudged = batch.inputs.copy()
        nudged.reshape(-1)[0] += H
        right = (loss_from(net, batch, 0, nudged) - record.loss) / H
        assert right == pytest.approx(-2.0, rel=1e-4)
        assert not _smooth_positions(net, batch.inputs, 0).any()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_activation_gradients_match_finite_differences(self, seed):
        """dL/dx of every activation matches central differences within 1e-4, away from kinks and pool ties."""
        net = make_tiny_net(seed)
        batch = make_batch(seed)
        record = backward(net, forward(net, batch))
        checked = 0
        for index in range(1, len(record.activations)):
            activation = record.activations[index]
            analytic = record.act_grads[index].reshape(-1)
            smooth = _smooth_positions(net, activation, index).reshape(-1)
            for flat in np.flatnonzero(smooth):
                plus = activation.copy()
                minus = activation.copy()
                plus.reshape(-1)[flat] += H
                minus.reshape(-1)[flat] -= H
                numeric = (loss_from(net, batch, index, plus) - loss_from(net, batch, index, minus)) / (2 * H)
                if abs(analytic[flat]) < 1e-6 and abs(numeric) < 1e-6:
                    continue
                assert _relative(analytic[flat], numeric) < 1e-4, (index, flat)
                checked += 1
        assert checked > 0


class TestHessianApp1:
    """Tests for layer-diagonal second-derivative backpropagation."""

    def test_exact_on_single_conv_mse(self):
        """Conv + mse is quadratic in the weights: app.1 is the exact diagonal."""
        layers = [LayerSpec(kind=LayerKind.CONV, name="conv", in_channels=2, out_channels=2, kernel=3, pad=1)]
        net = build_network(layers, (2, 4, 4), seed=7, loss_kind=LossKind.MSE, dtype=np.float64)
        rng = np.random.default_rng(8)
        batch = Batch(inputs=rng.standard_normal((3, 2, 4, 4)), targets=rng.standard_normal((3, 2, 4, 4)))
        record = evaluate(net, batch, app1=True, app2=False)
        weight = net.params[0].weight
        for flat in range(weight.size):
            grad_at = []
            for delta in (H, -H):
                weight.reshape(-1)[flat] += delta
                g = backward(net, forward(net, batch)).weight_grads[0].reshape(-1)[flat]
                weight.reshape(-1)[flat] -= delta
                grad_at.append(g)
            numeric = (grad_at[0] - grad_at[1]) / (2 * H)
            assert _relative(record.weight_hess_app1[0].reshape(-1)[flat], numeric) < 1e-3

    def test_zero_relu_input_blocks_second_derivatives(self):
        """All-zero pre-activations give zero second derivatives upstream of the ReLU."""
        layers = [
            LayerSpec(kind=LayerKind.DENSE, in_channels=3, out_channels=3, has_bias=False),
            LayerSpec(kind=LayerKind.RELU),
            LayerSpec(kind=LayerKind.DENSE, in_channels=3, out_channels=2),
        ]
        net = build_network(layers, (3, 1, 1), seed=0, loss_kind=LossKind.MSE, dtype=np.float64)
        net.params[0].weight[:] = 0
        batch = Batch(inputs=np.ones((2, 3, 1, 1)), targets=np.ones((2, 2)))
        record = evaluate(net, batch, app1=True, app2=False)
        assert np.all(record.act_hess_app1[1] == 0)
        assert np.all(record.weight_hess_app1[0] == 0)

    def test_requires_backward(self, tiny_net, tiny_batch):
        """app.1 needs gradients first."""
        with pytest.raises(MissingDerivativeError):
            hessian_diag_app1(tiny_net, forward(tiny_net, tiny_batch))

    def test_shapes_match_values(self, tiny_net, tiny_batch):
        """Every second-derivative tensor is shaped like its value."""
        record = evaluate(tiny_net, tiny_batch)
        for value, h2 in zip(record.activations, record.act_hess_app1):
            assert value.shape == h2.shape
        for index, p in tiny_net.params.items():
            assert record.weight_hess_app1[index].shape == p.weight.shape


class TestHessianApp2:
    """Tests for the Gauss-Newton diagonal."""

    def test_square_of_gradient(self):
        """0.3 -> 0.09 and 0 -> 0."""
        record = ActivationRecord(activations=[np.zeros(2)], loss=0.0)
        record.act_grads = [np.array([0.3, 0.0])]
        hessian_diag_app2(record)
        np.testing.assert_allclose(record.act_hess_app2[0], [0.09, 0.0])

    def test_definitional_and_nonnegative(self, tiny_net, tiny_batch):
        """app.2 equals the elementwise squared gradient and is never negative."""
        record = evaluate(tiny_net, tiny_batch, app1=False, app2=True)
        for g, h2 in zip(record.act_grads, record.act_hess_app2):
            np.testing.assert_array_equal(h2, np.square(g))
            assert np.all(h2 >= 0)
        for index, g in record.weight_grads.items():
            np.testing.assert_array_equal(record.weight_hess_app2[index], np.square(g))


class TestBatchAccumulator:
    """Tests for batch averaging."""

    def _record(self, value: np.ndarray) -> ActivationRecord:
        record = ActivationRecord(activations=[value.copy()], loss=float(value.sum()))
        record.weight_grads = {0: value * 2}
        return record

    def test_single_batch(self):
        """One batch averages to itself."""
        v = np.array([1.0, -2.0, 3.5])
        avg = read_average(accumulate(BatchAccumulator(), self._record(v)))
        np.testing.assert_array_equal(avg.activations[0], v)
        np.testing.assert_array_equal(avg.weight_grads[0], v * 2)

    def test_opposite_batches_cancel(self):
        """v and -v average to 0."""
        v = np.array([1.0, 2.0])
        acc = BatchAccumulator()
        acc.accumulate(self._record(v)).accumulate(self._record(-v))
        np.testing.assert_array_equal(acc.read_average().activations[0], [0.0, 0.0])

    def test_three_batches_mean(self, tiny_net):
        """Average of three evaluated batches matches an external recomputation."""
        records = [evaluate(tiny_net, make_batch(s)) for s in range(3)]
        acc = BatchAccumulator()
        for r in records:
            acc.accumulate(r)
        avg = acc.read_average()
        expected = sum(r.weight_grads[3] for r in records) / 3
        np.testing.assert_allclose(avg.weight_grads[3], expected, rtol=1e-12)
        assert avg.loss == pytest.approx(sum(r.loss for r in records) / 3)

    def test_identical_records_linearity(self, tiny_net, tiny_batch):
        """k copies of one record average to that record."""
        record = evaluate(tiny_net, tiny_batch)
        acc = BatchAccumulator()
        for _ in range(4):
            acc.accumulate(record)
        np.testing.assert_allclose(acc.read_average().act_hess_app1[2], record.act_hess_app1[2], rtol=1e-12)

    def test_shape_drift_raises(self):
        """Batches with different tensor shapes cannot be averaged."""
        acc = BatchAccumulator().accumulate(self._record(np.zeros(2)))
        with pytest.raises(ShapeMismatchError):
            acc.accumulate(self._record(np.zeros(3)))

    def test_read_before_accumulate(self):
        """Reading an empty accumulator is an error."""
        with pytest.raises(PruneTaxError):
            BatchAccumulator().read_average()
