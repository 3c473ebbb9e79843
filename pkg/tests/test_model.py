import numpy as np
import pytest

from sednet import tensor as T
from sednet.model import (ConfigError, Model, ModelConfig, build, forward, freeze_for_transfer,
                          param_count, predict, trainable_count)
from sednet.tensor import Parameter, ShapeError
from sednet.trainer import Adam


def conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def hand_tally(base=32, cin=1, classes=3):
    """Layer-by-layer parameter count, written out independently of the builder."""
    e1, e2, e3, bn = base, 2 * base, 4 * base, 8 * base
    d1, d2 = e2, e1
    total = 0
    total += conv_params(3, cin, e1) + conv_params(3, e1, e1)
    total += conv_params(3, e1, e2) + conv_params(3, e2, e2)
    total += conv_params(3, e2, e3) + conv_params(3, e3, e3)
    total += conv_params(3, e3, bn) + conv_params(3, bn, bn)
    total += conv_params(2, bn, bn // 2)
    total += conv_params(3, bn // 2 + e2, d1) + conv_params(3, d1, d1)
    total += conv_params(2, d1, d1 // 2)
    total += conv_params(3, d1 // 2 + e1, d2) + conv_params(3, d2, d2)
    total += conv_params(1, d2, classes)
    return total


GOLDEN_PARAMS = 1_486_499


def small_config(**kw):
    base = dict(input_height=8, input_width=8, base_filters=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def test_golden_count_matches_hand_tally():
    assert hand_tally() == GOLDEN_PARAMS


def test_default_param_count():
    n = param_count(build())
    assert n == GOLDEN_PARAMS
    assert 1_200_000 <= n <= 1_600_000


def test_single_head_count():
    params = {"head.weight": Parameter(np.zeros((1, 1, 32, 3))), "head.bias": Parameter(np.zeros(3))}
    assert param_count(Model(ModelConfig(), params)) == 99


def test_shape_chain_default():
    model = build()
    cap = {}
    out = forward(model, np.zeros((1, 128, 128, 1), np.float32), capture=cap)
    assert cap["enc1.conv2"].shape == (1, 128, 128, 32)
    assert cap["enc2.conv2"].shape == (1, 64, 64, 64)
    assert cap["enc3.conv2"].shape == (1, 32, 32, 128)
    assert cap["bottleneck.conv2"].shape == (1, 32, 32, 256)
    assert cap["dec1.conv2"].shape == (1, 64, 64, 64)
    assert cap["dec2.conv2"].shape == (1, 128, 128, 32)
    assert out.shape == (1, 128, 128, 3)
    assert np.all((out.data > 0) & (out.data < 1))


def test_descriptor_matches_runtime_shapes():
    model = build(small_config(input_height=16, input_width=16))
    cap = {}
    forward(model, np.zeros((1, 16, 16, 1), np.float32), capture=cap)
    for layer in model.layers:
        if layer.name in cap:
            assert cap[layer.name].shape[1:] == layer.output_shape, layer.name


def test_selective_skips():
    model = build()
    assert model.skip_sources() == ["enc2.conv2", "enc1.conv2"]
    for layer in model.layers:
        if layer.kind == "concat":
            assert not any(src.startswith(("enc3", "bottleneck")) for src in layer.inputs)


def test_summary_ends_with_total():
    text = build().summary()
    assert "1,486,499" in text.splitlines()[-2]


@pytest.mark.parametrize("size", [126, 130, 30])
def test_divisibility(size):
    with pytest.raises(ConfigError):
        ModelConfig(input_height=size, input_width=128)


def test_bottleneck_must_double():
    with pytest.raises(ConfigError):
        ModelConfig(encoder_depths=(32, 64, 128), bottleneck_depth=128)
    with pytest.raises(ConfigError):
        ModelConfig(encoder_depths=(32, 32, 128))


def test_zero_weights_give_half():
    model = build(small_config())
    for p in model.parameters():
        p.data[...] = 0
    out = forward(model, np.zeros((2, 8, 8, 1), np.float32))
    np.testing.assert_array_equal(out.data, np.full((2, 8, 8, 3), 0.5, np.float32))


def test_forward_deterministic(rng):
    model = build(small_config())
    x = rng.random((2, 8, 8, 1)).astype(np.float32)
    a = forward(model, x).data
    b = forward(model, x).data
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(predict(model, x, chunk=1), a)


def test_spatial_mismatch():
    with pytest.raises(ShapeError):
        forward(build(small_config()), np.zeros((1, 12, 12, 1)))


def test_build_seeded():
    a, b = build(small_config()), build(small_config())
    c = build(small_config(seed=4))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_freeze_for_transfer():
    model = build()
    total = param_count(model)
    assert trainable_count(model) == total
    freeze_for_transfer(model)
    assert trainable_count(model) == 99
    assert param_count(model) == total
    assert {n for n, p in model.params.items() if p.trainable} == {"head.weight", "head.bias"}


def test_frozen_values_survive_optimizer(rng):
    model = freeze_for_transfer(build(small_config()))
    before = {k: p.data.copy() for k, p in model.params.items()}
    x = rng.random((2, 8, 8, 1)).astype(np.float32)
    adam = Adam()
    for _ in range(3):
        T.zero_grad(model.parameters())
        with T.Tape() as tape:
            loss = T.sum(forward(model, x))
        T.backward(loss, tape)
        adam.step(model.params, 1e-2)
    for k, p in model.params.items():
        if k.startswith("head"):
            assert not np.array_equal(p.data, before[k])
        else:
            assert p.data.tobytes() == before[k].tobytes()


def test_fingerprint_ignores_seed():
    assert ModelConfig(seed=1).fingerprint() == ModelConfig(seed=2).fingerprint()
    assert ModelConfig(base_filters=16).fingerprint() != ModelConfig().fingerprint()
