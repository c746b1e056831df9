import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dproto import autodiff as ad
from dproto.autodiff import gradient_check
from dproto.backbone import build_backbone, extract_features, shape_trace
from dproto.config import BackboneConfig
from dproto.errors import ConfigError, ShapeMismatchError

from tests.conftest import tiny_config


def test_default_backbone_reaches_seven_by_seven():
    cfg = BackboneConfig()
    trace = shape_trace(cfg)
    assert trace[0] == (56, 56, 3)
    assert trace[-1][:2] == (7, 7)
    assert build_backbone(cfg, seed=0).output_shape == (7, 7, 32)


def test_grid_mismatch_reports_shape_trace():
    cfg = BackboneConfig(input_size=(32, 32, 3), target_grid=(7, 7))
    with pytest.raises(ConfigError, match="32x32x3"):
        build_backbone(cfg, seed=0)


def test_empty_grid_is_a_config_error():
    with pytest.raises(ConfigError):
        shape_trace(BackboneConfig(input_size=(4, 4, 3), conv_blocks=[(4, 3, 1, 2)] * 3))


@settings(max_examples=30, deadline=None)
@given(size=st.integers(8, 64), blocks=st.integers(1, 3))
def test_pooling_halves_the_grid(size, blocks):
    cfg = BackboneConfig(input_size=(size, size, 3), conv_blocks=[(4, 3, 1, 2)] * blocks)
    expected = size
    for _ in range(blocks):
        expected //= 2
    if expected < 1:
        with pytest.raises(ConfigError):
            shape_trace(cfg)
    else:
        assert shape_trace(cfg)[-1] == (expected, expected, 4)


def test_initialization_is_deterministic_in_seed():
    cfg = tiny_config().backbone
    a, b, c = build_backbone(cfg, 5), build_backbone(cfg, 5), build_backbone(cfg, 6)
    for name, tensor in a.parameters().items():
        np.testing.assert_array_equal(tensor.data, b.parameters()[name].data)
    assert any(not np.array_equal(t.data, c.parameters()[n].data) for n, t in a.parameters().items())


def test_features_have_expected_shape_and_are_non_negative():
    cfg = tiny_config().backbone
    net = build_backbone(cfg, 0)
    image = np.random.default_rng(0).uniform(size=(16, 16, 3))
    features = extract_features(net, image)
    assert features.shape == (4, 4, 5)
    assert features.data.min() >= 0.0
    batch = extract_features(net, np.stack([image, image]))
    assert batch.shape == (2, 4, 4, 5)
    np.testing.assert_allclose(batch.data[0], features.data)


def test_wrong_image_shape_is_rejected():
    net = build_backbone(tiny_config().backbone, 0)
    with pytest.raises(ShapeMismatchError):
        extract_features(net, np.zeros((15, 16, 3)))


def test_set_trainable_freezes_only_the_backbone_group():
    net = build_backbone(tiny_config().backbone, 0)
    net.set_trainable(backbone=False)
    assert all(not t.requires_grad and t.grad is None for t in net.backbone_parameters().values())
    assert all(t.requires_grad for t in net.shaping_parameters().values())
    net.set_trainable(backbone=True)
    assert all(t.requires_grad for t in net.backbone_parameters().values())


def test_detached_backbone_builds_no_graph():
    net = build_backbone(tiny_config().backbone, 0)
    out = net.detached()(np.zeros((1, 16, 16, 3)) + 0.5)
    assert not out.requires_grad


def test_features_are_differentiable_with_respect_to_the_image():
    net = build_backbone(tiny_config().backbone, 0)
    image = np.random.default_rng(1).uniform(0.1, 0.9, size=(16, 16, 3))
    weights = np.random.default_rng(2).normal(size=(4, 4, 5))

    def response(t):
        return ad.reduce_sum(ad.mul(extract_features(net, t), weights))

    assert gradient_check(response, image, exclude_kinks=True) < 1e-4
