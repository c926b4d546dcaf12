import numpy as np
import pytest

from src.core.errors import DimensionError
from src.core.rng import SeededStreams
from src.models.layers import (
    BatchNorm,
    Conv2D,
    Dense,
    LayerKind,
    LayerSpec,
    MaxPool2D,
    ReLU,
    Tanh,
)


@pytest.fixture
def rng():
    return SeededStreams(5).stream("test-layers")


def numeric_input_grad(layer, x, weights, eps=1e-6):
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float((layer.forward(x, False) * weights).sum())
        flat[i] = orig - eps
        down = float((layer.forward(x, False) * weights).sum())
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


def test_param_counts():
    assert LayerSpec(LayerKind.DENSE, (400, 120)).param_count() == 48120
    assert LayerSpec(LayerKind.CONV, (1, 6, 5, 1, 0)).param_count() == 156
    assert LayerSpec(LayerKind.CONV, (6, 16, 5, 1, 0)).param_count() == 2416
    assert LayerSpec(LayerKind.BATCHNORM, (4,)).param_count() == 8
    assert LayerSpec(LayerKind.MAXPOOL, (2,)).param_count() == 0


def test_output_shapes():
    conv = LayerSpec(LayerKind.CONV, (1, 6, 5, 1, 0))
    assert conv.output_shape((1, 32, 32)) == (6, 28, 28)
    assert LayerSpec(LayerKind.MAXPOOL, (2,)).output_shape((6, 28, 28)) == (6, 14, 14)
    assert LayerSpec(LayerKind.FLATTEN).output_shape((16, 5, 5)) == (400,)
    with pytest.raises(DimensionError):
        conv.output_shape((3, 32, 32))
    with pytest.raises(DimensionError):
        LayerSpec(LayerKind.MAXPOOL, (2,)).output_shape((1, 5, 5))


def test_dense_forward_backward(rng):
    layer = Dense(3, 2, "fc", rng, dtype=np.float64)
    x = rng.normal(size=(4, 3))
    out = layer.forward(x, True)
    assert np.allclose(out, x @ layer.weight.T + layer.bias)
    g = rng.normal(size=(4, 2))
    grad_x = layer.backward(g)
    assert np.allclose(grad_x, g @ layer.weight)
    assert np.allclose(layer.grads["weight"], g.T @ x)
    assert np.allclose(layer.grads["bias"], g.sum(axis=0))
    assert "threshold" not in layer.grads


def test_dense_pruned_forward_uses_masked_weight(rng):
    layer = Dense(4, 3, "fc", rng, dtype=np.float64)
    layer.pruning = True
    layer.threshold[...] = 0.5
    x = rng.normal(size=(2, 4))
    out = layer.forward(x, True)
    mask = np.abs(layer.weight) >= 0.5
    assert np.array_equal(layer.prune_mask, mask)
    assert np.allclose(out, x @ (layer.weight * mask).T + layer.bias)
    layer.backward(np.ones((2, 3)))
    assert layer.grads["threshold"].shape == (3,)


def test_eval_forward_does_not_touch_prune_mask(rng):
    layer = Dense(4, 3, "fc", rng)
    layer.pruning = True
    stale = layer.prune_mask.copy()
    layer.threshold[...] = 10.0
    layer.forward(rng.normal(size=(1, 4)).astype(np.float32), False)
    assert np.array_equal(layer.prune_mask, stale)


def test_conv_forward_backward_input_gradient(rng):
    layer = Conv2D(2, 3, 3, "conv", rng, padding=1, dtype=np.float64)
    x = rng.normal(size=(2, 2, 4, 4))
    out = layer.forward(x, True)
    assert out.shape == (2, 3, 4, 4)
    weights = rng.normal(size=out.shape)
    grad_x = layer.backward(weights)
    assert np.allclose(grad_x, numeric_input_grad(layer, x, weights), atol=1e-6)
    assert layer.grads["weight"].shape == layer.weight.shape
    assert np.allclose(layer.grads["bias"], weights.sum(axis=(0, 2, 3)))


def test_maxpool_forward_and_tie_routing():
    pool = MaxPool2D(2, "pool")
    x = np.array([[[[1.0, 3.0], [3.0, 2.0]]]])
    out = pool.forward(x, True)
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 3.0
    grad = pool.backward(np.ones((1, 1, 1, 1)))
    assert np.array_equal(grad[0, 0], np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_maxpool_rejects_untiled_input():
    with pytest.raises(DimensionError):
        MaxPool2D(2, "pool").forward(np.zeros((1, 1, 3, 4)), False)


def test_activations_gradients(rng):
    x = rng.normal(size=(3, 5))
    weights = rng.normal(size=(3, 5))
    for layer in (Tanh("tanh"), ReLU("relu")):
        layer.forward(x, True)
        assert np.allclose(layer.backward(weights), numeric_input_grad(layer, x, weights), atol=1e-6)


def test_batchnorm_training_gradient(rng):
    bn = BatchNorm(3, "bn", dtype=np.float64)
    bn.gain[...] = rng.uniform(0.5, 1.5, size=3)
    x = rng.normal(size=(4, 3, 2, 2))
    weights = rng.normal(size=x.shape)
    bn.forward(x, True)
    analytic = bn.backward(weights)

    eps = 1e-6
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        values = []
        for delta in (eps, -eps):
            flat[i] = orig + delta
            shifted = BatchNorm(3, "shifted", dtype=np.float64)
            shifted.gain[...] = bn.gain
            values.append(float((shifted.forward(x, True) * weights).sum()))
        flat[i] = orig
        numeric.reshape(-1)[i] = (values[0] - values[1]) / (2 * eps)
    assert np.allclose(analytic, numeric, atol=1e-5)


def test_frozen_batchnorm_uses_running_stats_and_zero_grads(rng):
    bn = BatchNorm(2, "bn", dtype=np.float64)
    bn.running_mean[...] = [1.0, -1.0]
    bn.running_var[...] = [4.0, 0.25]
    bn.frozen = True
    x = rng.normal(size=(5, 2))
    out = bn.forward(x, True)
    expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(out, expected)
    assert np.array_equal(bn.running_mean, [1.0, -1.0])
    bn.backward(np.ones_like(x))
    assert not bn.grads["gain"].any() and not bn.grads["bias"].any()


def test_state_round_trip(rng):
    source = Dense(3, 2, "fc", rng)
    source.freeze_mask[0, 1] = True
    target = Dense(3, 2, "fc", SeededStreams(9).stream("other"))
    target.load_state(source.state())
    assert np.array_equal(target.weight, source.weight)
    assert target.freeze_mask[0, 1] and target.freeze_mask.sum() == 1


def test_load_state_shape_mismatch(rng):
    layer = Dense(3, 2, "fc", rng)
    with pytest.raises(DimensionError):
        layer.load_state({"weight": np.zeros((3, 3), np.float32)})
