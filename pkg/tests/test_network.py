import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesioncam.errors import ConfigError, FormatError, ShapeError, UsageError
from lesioncam.network import (
    LayerSpec,
    NetworkConfig,
    TrainParams,
    build_network,
    conv,
    images_to_tensor,
    load_weights,
    read_weight_file,
    save_weights,
    train,
)


@pytest.fixture(scope="module")
def tiny():
    return build_network(NetworkConfig("tiny", seed=3))


@pytest.fixture
def batch():
    return np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)


def small_config(seed=0, dropout_p=0.5, input_size=8):
    layers = [conv(4), LayerSpec("relu"), LayerSpec("maxpool2x2"), conv(4, padding=0), LayerSpec("relu"),
              LayerSpec("gap"), LayerSpec("dropout", p=dropout_p), LayerSpec("fc", num_classes=3)]
    return NetworkConfig("custom", layers=layers, input_size=input_size, dropout_p=dropout_p, seed=seed)


# ---------------------------------------------------------------- configs

def test_paper14_feature_shape():
    cfg = NetworkConfig("paper14")
    assert cfg.input_size == 224
    assert cfg.feature_shape() == (1024, 10, 10)
    kinds = [l.kind for l in cfg.layers]
    assert kinds.count("conv") == 14 and kinds.count("maxpool2x2") == 4
    assert [l.padding for l in cfg.layers if l.kind == "conv"] == [1] * 12 + [0, 0]
    assert kinds[-3:] == ["gap", "dropout", "fc"]


def test_paper14_pools_after_blocks():
    cfg = NetworkConfig("paper14")
    convs_before_pool, n = [], 0
    for l in cfg.layers:
        n += l.kind == "conv"
        if l.kind == "maxpool2x2":
            convs_before_pool.append(n)
    assert convs_before_pool == [2, 4, 7, 10]


def test_tiny_trace_shapes(tiny, batch):
    tr = tiny.forward(batch)
    k, h, w = tiny.config.feature_shape()
    assert tr.feature_maps.shape == (2, k, h, w) and h > 0
    assert tr.gap_vector.shape == (2, k)
    assert tr.logits.shape == tr.probs.shape == (2, 3)


def test_fc_before_gap_rejected():
    layers = [conv(4), LayerSpec("relu"), LayerSpec("fc", num_classes=3), LayerSpec("gap")]
    with pytest.raises(ConfigError, match="fc must be the last"):
        NetworkConfig("custom", layers=layers, input_size=8)


@pytest.mark.parametrize("layers,msg", [
    ([conv(4), LayerSpec("relu"), LayerSpec("fc", num_classes=3)], "one gap"),
    ([conv(4), LayerSpec("gap"), LayerSpec("gap"), LayerSpec("fc", num_classes=3)], "one gap"),
    ([conv(4), LayerSpec("gap")], "one fc"),
    ([LayerSpec("gap"), LayerSpec("fc", num_classes=3)], "conv layer"),
    ([conv(4), LayerSpec("maxpool2x2"), LayerSpec("gap"), LayerSpec("fc", num_classes=3)], "relu"),
    ([conv(4), LayerSpec("gap"), LayerSpec("fc", num_classes=2)], "num_classes"),
])
def test_invalid_layer_plans(layers, msg):
    with pytest.raises(ConfigError, match=msg):
        NetworkConfig("custom", layers=layers, input_size=8)


def test_shape_arithmetic_checked():
    layers = [conv(4, padding=0), LayerSpec("relu"), LayerSpec("maxpool2x2"), conv(4), LayerSpec("relu"),
              LayerSpec("gap"), LayerSpec("fc", num_classes=3)]
    with pytest.raises(ConfigError, match="odd"):
        NetworkConfig("custom", layers=layers, input_size=9)


@pytest.mark.parametrize("kw", [dict(kind="conv", out_channels=0), dict(kind="conv", out_channels=2, stride=0),
                                dict(kind="conv", out_channels=2, padding=-1), dict(kind="dropout", p=1.0),
                                dict(kind="fc"), dict(kind="softmax")])
def test_layer_spec_invariants(kw):
    with pytest.raises(ConfigError):
        LayerSpec(**kw)


def test_config_dict_roundtrip():
    cfg = small_config(seed=4)
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"preset": "tiny", "width": 3})


# ---------------------------------------------------------------- forward

def test_zero_weights_give_uniform_probs(batch):
    net = build_network(NetworkConfig("tiny"))
    for p in net.params():
        p.value[...] = 0
    tr = net.forward(batch)
    assert not tr.logits.any()
    np.testing.assert_allclose(tr.probs, 1 / 3)


def test_eval_forward_deterministic(tiny, batch):
    a, b = tiny.forward(batch), tiny.forward(batch)
    np.testing.assert_array_equal(a.probs, b.probs)
    np.testing.assert_array_equal(a.feature_maps, b.feature_maps)


def test_trace_replay(tiny, batch):
    tr = tiny.forward(batch)
    replay = tr.feature_maps.astype(np.float64).mean(axis=(2, 3)) @ tiny.fc_weights.astype(np.float64)
    np.testing.assert_allclose(tr.logits, replay, rtol=1e-5, atol=1e-5)


def test_trace_invariants(tiny, batch):
    tr = tiny.forward(batch)
    np.testing.assert_allclose(tr.probs.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(tr.gap_vector, tr.feature_maps.mean(axis=(2, 3)), atol=1e-6)
    np.testing.assert_allclose(tr.logits, tr.gap_vector @ tiny.fc_weights, atol=1e-6)


def test_wrong_input_size(tiny):
    with pytest.raises(ShapeError):
        tiny.forward(np.zeros((1, 3, 32, 32), np.float32))


def test_bad_mode(tiny, batch):
    with pytest.raises(UsageError):
        tiny.forward(batch, mode="test")


def test_train_mode_dropout_changes_logits_not_features(batch):
    net = build_network(NetworkConfig("tiny", seed=1))
    ev, tr = net.forward(batch), net.forward(batch, "train")
    np.testing.assert_array_equal(ev.feature_maps, tr.feature_maps)
    assert not np.array_equal(ev.logits, tr.logits)


def test_predict_chunks_match_single_forward(tiny, batch):
    np.testing.assert_allclose(tiny.predict(batch, batch_size=1), tiny.forward(batch).probs, atol=1e-6)


def test_images_to_tensor_centres_on_median():
    img = np.full((4, 4, 3), 200, np.uint8)
    img[0, 0] = 0
    x = images_to_tensor(img)
    assert x.shape == (1, 3, 4, 4) and x.dtype == np.float32
    assert x[0, :, 1, 1].tolist() == [0.0, 0.0, 0.0]
    assert x[0, 0, 0, 0] == pytest.approx(-2 * 200 / 255)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def ten_samples():
    rng = np.random.default_rng(5)
    return rng.standard_normal((10, 3, 8, 8)).astype(np.float32), rng.integers(0, 3, 10)


def test_single_sample_loss_decreases():
    x = np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(np.float32)
    net = build_network(NetworkConfig("tiny", seed=0))
    hist = train(net, x, np.array([1]), TrainParams(lr=0.01, epochs=20, batch_size=1))
    assert len(hist) == 20 and hist[-1] < hist[0]


def test_ten_samples_fifty_epochs(ten_samples):
    x, y = ten_samples
    net = build_network(small_config(dropout_p=0.0))
    hist = train(net, x, y, TrainParams(lr=0.03, epochs=50, batch_size=10))
    assert hist[-1] < hist[0]
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_tiny_preset_ten_samples_fifty_epochs():
    from lesioncam import tensor_nn as nn

    rng = np.random.default_rng(8)
    x = rng.standard_normal((10, 3, 64, 64)).astype(np.float32)
    y = rng.integers(0, 3, 10)
    net = build_network(NetworkConfig("tiny", seed=2))
    before = nn.cross_entropy(net.forward(x).probs, y)[0]
    hist = train(net, x, y, TrainParams(lr=0.01, epochs=50, batch_size=10))
    after = nn.cross_entropy(net.forward(x).probs, y)[0]
    assert hist[-1] < hist[0] and after < before


def test_lr_zero_loss_constant(ten_samples):
    x, y = ten_samples
    net = build_network(small_config(dropout_p=0.0))
    hist = train(net, x, y, TrainParams(lr=0.0, epochs=5, batch_size=4))
    np.testing.assert_allclose(hist, hist[0], rtol=1e-6)


def test_same_seed_bit_identical_weights(ten_samples):
    x, y = ten_samples
    nets = []
    for _ in range(2):
        net = build_network(small_config(seed=7))
        train(net, x, y, TrainParams(lr=0.05, epochs=3, batch_size=3, seed=11))
        nets.append(net)
    for a, b in zip(nets[0].params(), nets[1].params()):
        np.testing.assert_array_equal(a.value, b.value)


def test_empty_dataset_rejected():
    net = build_network(small_config())
    with pytest.raises(UsageError):
        train(net, np.zeros((0, 3, 8, 8), np.float32), np.zeros(0, int), TrainParams())


def test_label_count_mismatch():
    net = build_network(small_config())
    with pytest.raises(ShapeError):
        train(net, np.zeros((2, 3, 8, 8), np.float32), np.zeros(3, int), TrainParams())


def test_progress_callback(ten_samples):
    x, y = ten_samples
    seen = []
    train(build_network(small_config()), x, y, TrainParams(epochs=2), progress=lambda e, l: seen.append(e))
    assert seen == [0, 1]


def test_copy_is_independent(ten_samples):
    net = build_network(small_config())
    twin = net.copy()
    twin.params()[0].value[...] += 1
    assert not np.array_equal(net.params()[0].value, twin.params()[0].value)


# ---------------------------------------------------------------- weight files

def test_weight_roundtrip_bit_exact(tmp_path, tiny, batch):
    path = tmp_path / "w.bin"
    save_weights(tiny, path)
    loaded = load_weights(path, tiny.config)
    for a, b in zip(tiny.params(), loaded.params()):
        np.testing.assert_array_equal(a.value, b.value)
    np.testing.assert_array_equal(tiny.forward(batch).probs, loaded.forward(batch).probs)
    save_weights(loaded, tmp_path / "w2.bin")
    assert path.read_bytes() == (tmp_path / "w2.bin").read_bytes()


def test_weight_file_layout(tmp_path):
    net = build_network(small_config())
    path = tmp_path / "w.bin"
    save_weights(net, path)
    data = path.read_bytes()
    assert data[:6] == b"LCAMW1"
    (count,) = struct.unpack_from("<I", data, 6)
    assert count == len(net.params())
    shape = struct.unpack_from("<4I", data, 10)
    assert shape == (4, 3, 3, 3)
    first = np.frombuffer(data, "<f4", count=4 * 27, offset=26)
    np.testing.assert_array_equal(first, net.params()[0].value.ravel())
    bias_shape = struct.unpack_from("<4I", data, 26 + 4 * 108)
    assert bias_shape == (1, 1, 1, 4)


@pytest.mark.parametrize("cut", [3, 8, 12, 40, -1])
def test_truncated_weight_file(tmp_path, cut):
    path = tmp_path / "w.bin"
    save_weights(build_network(small_config()), path)
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FormatError):
        load_weights(path, small_config())


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "w.bin"
    save_weights(build_network(small_config()), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_weight_file(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"NOTW01" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        read_weight_file(path)


def test_paper14_file_under_tiny_config(tmp_path):
    path = tmp_path / "paper14.bin"
    save_weights(build_network(NetworkConfig("paper14")), path)
    with pytest.raises(FormatError):
        load_weights(path, NetworkConfig("tiny"))


def test_same_count_wrong_shape(tmp_path):
    path = tmp_path / "w.bin"
    save_weights(build_network(small_config()), path)
    other = NetworkConfig("custom", layers=[conv(5), LayerSpec("relu"), LayerSpec("maxpool2x2"),
                                            conv(4, padding=0), LayerSpec("relu"), LayerSpec("gap"),
                                            LayerSpec("fc", num_classes=3)], input_size=8)
    with pytest.raises(FormatError, match="shape"):
        load_weights(path, other)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weight_roundtrip_property(tmp_path_factory, seed):
    net = build_network(small_config(seed=seed))
    path = tmp_path_factory.mktemp("w") / "w.bin"
    save_weights(net, path)
    for a, b in zip(net.params(), load_weights(path, net.config).params()):
        assert a.value.tobytes() == b.value.tobytes()
