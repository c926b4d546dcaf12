import struct

import numpy as np
import pytest

from src.core.errors import ConfigurationError, DimensionError, FormatError, StateError
from src.core.rng import SeededStreams
from src.core.tensor import softmax_cross_entropy
from src.experiments.verify import gradient_check
from src.models.checkpoint import MAGIC, decode_records, encode_records, load_checkpoint, read_checkpoint, \
    save_checkpoint
from src.models.layers import LayerKind, LayerSpec
from src.models.network import Network, build_from_specs, build_lenet5, build_network, build_toy_cnn, \
    build_toy_mlp, count_params_for_specs, lenet5_specs


@pytest.fixture
def rng():
    return SeededStreams(5).stream("test-network")


@pytest.fixture
def toy_cnn():
    return build_toy_cnn((1, 8, 8), 10, seed=5, batchnorm=True)


def test_lenet5_parameter_count():
    assert count_params_for_specs(lenet5_specs()) == 156 + 2416 + 48120 + 10164 + 850 == 61706
    assert build_lenet5().count_params() == 61706


def test_lenet5_rejects_other_image_sizes():
    with pytest.raises(ConfigurationError):
        build_lenet5((1, 28, 28))


def test_forward_shapes(toy_cnn, rng):
    logits = toy_cnn.forward(rng.normal(size=(5, 1, 8, 8)).astype(np.float32), "train")
    assert logits.shape == (5, 10) and logits.dtype == np.float32
    assert toy_cnn.predict(np.zeros((0, 1, 8, 8), np.float32)).shape == (0, 10)


def test_forward_validation(toy_cnn):
    with pytest.raises(DimensionError):
        toy_cnn.forward(np.zeros((2, 1, 9, 9), np.float32))
    with pytest.raises(ConfigurationError):
        toy_cnn.forward(np.zeros((2, 1, 8, 8), np.float32), "predict")


def test_backward_requires_train_forward(toy_cnn):
    toy_cnn.forward(np.zeros((2, 1, 8, 8), np.float32), "eval")
    with pytest.raises(StateError):
        toy_cnn.backward(np.zeros((2, 10), np.float32))


def test_backward_returns_gradient_for_every_parameter(toy_cnn, rng):
    toy_cnn.set_pruning(True)
    images = rng.normal(size=(4, 1, 8, 8)).astype(np.float32)
    _, grad = softmax_cross_entropy(toy_cnn.forward(images, "train"), np.arange(4))
    grads = toy_cnn.backward(grad)
    params = toy_cnn.named_parameters()
    assert set(params) <= set(grads)
    for name, value in params.items():
        assert grads[name].shape == value.shape, name


def test_network_requires_dense_head(rng):
    specs = [LayerSpec(LayerKind.FLATTEN), LayerSpec(LayerKind.DENSE, (4, 3)), LayerSpec(LayerKind.RELU)]
    with pytest.raises(ConfigurationError):
        build_from_specs(specs, (1, 2, 2), 3, SeededStreams(5))


def test_same_seed_same_initialization():
    a = build_toy_mlp((1, 4, 4), 3, seed=11)
    b = build_toy_mlp((1, 4, 4), 3, seed=11)
    c = build_toy_mlp((1, 4, 4), 3, seed=12)
    assert all(np.array_equal(x, y) for x, y in zip(a.named_parameters().values(), b.named_parameters().values()))
    assert not np.array_equal(a.masked_layers()[0].weight, c.masked_layers()[0].weight)


def test_count_used_tracks_active_masks():
    net = build_toy_mlp((1, 2, 2), 2, hidden=3)
    total = net.count_params()
    assert net.count_used() == total
    first = net.masked_layers()[0]
    first.prune_mask[...] = False
    assert net.count_used() == total - first.weight.size
    first.freeze_mask[0, 0] = True
    assert net.count_used() == total - first.weight.size + 1
    assert net.layer_usage()[first.name] == pytest.approx(1 / first.weight.size)


def test_clone_is_independent(toy_cnn):
    twin = toy_cnn.clone()
    twin.masked_layers()[0].weight[...] = 0
    assert toy_cnn.masked_layers()[0].weight.any()


def test_build_network_unknown_model():
    with pytest.raises(ConfigurationError):
        build_network("resnet", (1, 8, 8), 10)


def test_surrogate_gradients_match_finite_differences(rng):
    net = build_toy_mlp((1, 3, 3), 3, seed=5, hidden=6, dtype=np.float64)
    net.set_pruning(True, "surrogate")
    for layer in net.masked_layers():
        layer.threshold[...] = rng.uniform(0.0, 0.5, size=layer.threshold.shape)
        layer.freeze_mask = rng.random(layer.weight.shape) < 0.25
    images = rng.normal(size=(5, 1, 3, 3))
    labels = rng.integers(0, 3, size=5)
    assert gradient_check(net, images, labels, alpha=0.1, coords=25) <= 1e-3


def test_checkpoint_round_trip(toy_cnn, tmp_path, rng):
    layer = toy_cnn.masked_layers()[1]
    layer.freeze_mask = rng.random(layer.weight.shape) < 0.3
    layer.threshold[...] = 0.125
    layer.bias_frozen = True
    toy_cnn.batchnorm_layers()[0].frozen = True
    path = save_checkpoint(toy_cnn, tmp_path / "ckpt" / "dataset_0.aclk")
    assert path.read_bytes()[:5] == MAGIC

    fresh = build_toy_cnn((1, 8, 8), 10, seed=99, batchnorm=True)
    load_checkpoint(fresh, path)
    for name, value in toy_cnn.state_dict().items():
        assert np.array_equal(fresh.state_dict()[name], value), name
    assert fresh.batchnorm_layers()[0].frozen
    assert fresh.masked_layers()[1].bias_frozen, "Should restore the bias freeze flag"
    assert not fresh.masked_layers()[0].bias_frozen
    images = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
    assert np.array_equal(fresh.predict(images), toy_cnn.predict(images))


def test_checkpoint_records_preserve_dtypes(tmp_path):
    records = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.array([True, False, True]),
               "c": np.float64(2.5) * np.ones((1,)), "d": np.zeros((0, 4), np.float32)}
    decoded = decode_records(encode_records(records))
    for key, value in records.items():
        assert decoded[key].dtype == value.dtype and np.array_equal(decoded[key], value), key


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.aclk"
    path.write_bytes(b"NOPE!" + b"\x00" * 8)
    with pytest.raises(FormatError) as info:
        read_checkpoint(path)
    assert info.value.field == "magic"


def test_checkpoint_truncated_payload():
    data = encode_records({"w": np.ones((4, 4), np.float32)})
    with pytest.raises(FormatError) as info:
        decode_records(data[:-3])
    assert info.value.field == "w"


def test_checkpoint_record_count_must_cover_the_file():
    data = encode_records({"w": np.ones((2, 2), np.float32), "m": np.array([True, False])})
    assert struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])[0] == 2, "Should store the record count after the magic"
    short_count = data[:len(MAGIC)] + struct.pack("<I", 1) + data[len(MAGIC) + 4:]
    with pytest.raises(FormatError) as info:
        decode_records(short_count)
    assert info.value.field == "record_count", "Should reject bytes beyond the counted records"
    long_count = data[:len(MAGIC)] + struct.pack("<I", 3) + data[len(MAGIC) + 4:]
    with pytest.raises(FormatError):
        decode_records(long_count)


def test_checkpoint_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_records({"x": np.zeros(3, dtype=np.complex64)})


def test_checkpoint_shape_mismatch_on_load(tmp_path):
    small = build_toy_mlp((1, 4, 4), 3, hidden=4)
    large = build_toy_mlp((1, 4, 4), 3, hidden=8)
    path = save_checkpoint(small, tmp_path / "small.aclk")
    with pytest.raises(DimensionError):
        load_checkpoint(large, path)


def test_network_rejects_wrong_head_width():
    specs = [LayerSpec(LayerKind.FLATTEN), LayerSpec(LayerKind.DENSE, (4, 3))]
    with pytest.raises(ConfigurationError):
        Network(build_from_specs(specs, (1, 2, 2), 3, SeededStreams(5)).layers, (1, 2, 2), 5)


def test_toy_mlp_activation_choice():
    tanh = build_toy_mlp((1, 4, 4), 3, seed=5, hidden=6, activation="tanh")
    relu = build_toy_mlp((1, 4, 4), 3, seed=5, hidden=6)
    assert tanh.layers[2].spec.kind == LayerKind.TANH, "Should place tanh after the hidden layer"
    assert relu.layers[2].spec.kind == LayerKind.RELU
    assert tanh.count_params() == relu.count_params()
    with pytest.raises(ConfigurationError):
        build_toy_mlp((1, 4, 4), 3, activation="gelu")
