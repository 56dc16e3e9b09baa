"""Unit tests for the layers and the detector network."""

import numpy as np
import pytest

from tadlet.config import NetConfig, TrainConfig
from tadlet.errors import ConfigurationError, ShapeError
from tadlet.layers import Conv1d, ReLU, Sequential
from tadlet.network import (
    DeskBackbone,
    Detector,
    SpatialReduction,
    TemporalDownsample,
    TemporalFPN,
    TemporalPredictionHead,
)
from tadlet.trainer import SGD


@pytest.fixture
def small_default_layout() -> NetConfig:
    """Default levels, classes and anchors with narrow layers."""
    return NetConfig(backbone_channels=8, tdm_channels=8, fpn_channels=8, head_channels=8, head_convs=1)


class TestConv1d:
    """Cross-correlation layer."""

    def test_hand_example(self) -> None:
        conv = Conv1d(1, 1, 3)
        conv.weight.data[:] = np.array([1.0, 1.0, 1.0]).reshape(1, 1, 3)
        out = conv(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        assert out[0, 0].tolist() == [3.0, 6.0, 9.0, 7.0]

    def test_identity_kernel(self, rng: np.random.Generator) -> None:
        conv = Conv1d(2, 2, 3)
        conv.weight.data[:] = 0.0
        conv.weight.data[0, 0, 1] = conv.weight.data[1, 1, 1] = 1.0
        x = rng.standard_normal((3, 2, 10))
        assert np.allclose(conv(x), x)

    def test_stride_two_halves(self, rng: np.random.Generator) -> None:
        conv = Conv1d(2, 4, 3, stride=2)
        assert conv(rng.standard_normal((1, 2, 96))).shape == (1, 4, 48)
        assert conv.output_length(96) == 48

    def test_wrong_channels(self) -> None:
        with pytest.raises(ShapeError, match="Conv1d expects"):
            Conv1d(2, 2)(np.zeros((1, 3, 8)))

    def test_backward_without_forward(self) -> None:
        with pytest.raises(RuntimeError, match="without a matching"):
            Conv1d(1, 1).backward(np.zeros((1, 1, 4)))

    def test_eval_mode_keeps_no_cache(self, rng: np.random.Generator) -> None:
        layer = Sequential(Conv1d(2, 2), ReLU())
        layer.eval()
        layer(rng.standard_normal((1, 2, 8)))
        assert all(not m._cache for m in layer.modules())


class TestBackbone:
    """Fixed pooling + pointwise projection."""

    def test_shapes(self, rng: np.random.Generator) -> None:
        backbone = DeskBackbone(5)
        assert backbone(rng.uniform(0, 255, (1, 3, 64, 112, 112))).shape == (1, 5, 8, 4, 4)
        assert backbone(rng.uniform(0, 255, (1, 3, 768, 32, 32))).shape == (1, 5, 96, 1, 1)

    def test_ceil_mode_partial_block(self) -> None:
        assert DeskBackbone.pool(np.full((1, 3, 8, 40, 40), 255.0)).shape == (1, 3, 1, 2, 2)

    def test_constant_mid_gray_pools_to_zero(self) -> None:
        pooled = DeskBackbone.pool(np.full((2, 3, 16, 64, 64), 127.5))
        assert np.allclose(pooled, 0.0)
        assert np.allclose(DeskBackbone(4)(np.full((2, 3, 16, 64, 64), 127.5)), 0.0)

    def test_clip_length_multiple_of_eight(self) -> None:
        with pytest.raises(ConfigurationError, match="divisible by 8"):
            DeskBackbone.pool(np.zeros((1, 3, 12, 32, 32)))

    def test_frozen_projection_unchanged_after_step(self, rng: np.random.Generator) -> None:
        cfg = NetConfig(backbone_channels=4, tdm_channels=4, fpn_channels=4, head_channels=4, head_convs=1,
                        num_levels=3, frozen=True)
        model = Detector(cfg)
        before = model.backbone.weight.data.copy()
        output = model(pixels=rng.uniform(0, 255, (1, 3, 32, 32, 32)))
        model.backward(output)
        SGD(list(model.named_parameters()), TrainConfig()).step(0.1)
        assert np.array_equal(model.backbone.weight.data, before)
        assert not np.array_equal(model.head.cls_out.weight.data, Detector(cfg).head.cls_out.weight.data)


class TestSpatialReduction:
    """SRM variants."""

    def test_avg_and_max(self) -> None:
        feat = np.arange(16, dtype=np.float64).reshape(1, 1, 1, 4, 4)
        assert SpatialReduction(1, "avg")(feat)[0, 0, 0] == pytest.approx(7.5)
        assert SpatialReduction(1, "max")(feat)[0, 0, 0] == 15.0

    def test_example_average(self) -> None:
        feat = np.zeros((1, 1, 1, 4, 4))
        feat[..., :2, :] = np.array([1.0, 2.0, 3.0, 4.0])
        assert SpatialReduction(1, "avg")(feat)[0, 0, 0] == pytest.approx(2.5 / 2)
        assert SpatialReduction(1, "avg")(np.broadcast_to(np.array([1.0, 2.0, 3.0, 4.0]), (1, 1, 1, 4, 4)))[0, 0, 0] == 2.5

    def test_conv_with_uniform_weights_is_average(self, rng: np.random.Generator) -> None:
        srm = SpatialReduction(3, "conv")
        srm.weight.data[:] = 1.0 / 16.0
        feat = rng.standard_normal((2, 3, 5, 4, 4))
        assert np.allclose(srm(feat), SpatialReduction(3, "avg")(feat))

    def test_conv_needs_four_by_four(self) -> None:
        with pytest.raises(ConfigurationError, match="4x4"):
            SpatialReduction(1, "conv")(np.zeros((1, 1, 2, 2, 2)))

    def test_unknown_mode(self) -> None:
        with pytest.raises(ConfigurationError, match="unknown SRM mode"):
            SpatialReduction(1, "median")


class TestNeck:
    """TDM and TFPN."""

    def test_tdm_lengths(self, rng: np.random.Generator) -> None:
        levels = TemporalDownsample(4, 6, 5)(rng.standard_normal((1, 4, 96)))
        assert [lv.shape[2] for lv in levels] == [96, 48, 24, 12, 6]
        assert [lv.shape[1] for lv in levels] == [4, 6, 6, 6, 6]

    def test_tdm_zero_in_zero_out(self) -> None:
        for level in TemporalDownsample(4, 6, 5)(np.zeros((1, 4, 96))):
            assert not level.any()

    def test_tdm_length_must_divide(self) -> None:
        with pytest.raises(ConfigurationError, match="divisible by 16"):
            TemporalDownsample(4, 6, 5)(np.zeros((1, 4, 100)))

    def test_tfpn_shapes_and_zeros(self) -> None:
        levels = TemporalDownsample(4, 6, 5)(np.zeros((1, 4, 96)))
        pyramid = TemporalFPN([4, 6, 6, 6, 6], 5)(levels)
        assert [p.shape for p in pyramid] == [(1, 5, t) for t in (96, 48, 24, 12, 6)]
        assert not any(p.any() for p in pyramid)


class TestHead:
    """Shared TPM."""

    def test_shapes(self, rng: np.random.Generator) -> None:
        head = TemporalPredictionHead(4, 4, 2, num_classes=3, num_anchors=5)
        cls, reg = head([rng.standard_normal((1, 4, 6)), rng.standard_normal((1, 4, 3))])
        assert cls[0].shape == (1, 15, 6)
        assert reg[0].shape == (1, 10, 6)
        assert cls[1].shape == (1, 15, 3)

    def test_same_weights_every_level(self, rng: np.random.Generator) -> None:
        head = TemporalPredictionHead(4, 4, 2, num_classes=2, num_anchors=3)
        feat = rng.standard_normal((1, 4, 6))
        cls, reg = head([feat, feat])
        assert np.array_equal(cls[0], cls[1])
        assert np.array_equal(reg[0], reg[1])

    def test_prior_bias(self) -> None:
        head = TemporalPredictionHead(4, 4, 1, num_classes=2, num_anchors=3, prior_prob=0.01)
        assert np.allclose(head.cls_out.bias.data, -np.log(99.0))


class TestDetector:
    """The assembled network."""

    def test_prediction_count(self, small_default_layout: NetConfig, rng: np.random.Generator) -> None:
        model = Detector(small_default_layout)
        cls, reg = model.flatten(model(features=rng.standard_normal((1, 8, 96))))
        assert cls.shape == (1, 930, 3)
        assert reg.shape == (1, 930, 2)

    def test_feature_bypass_matches_pixels(self, tiny_net_cfg: NetConfig, rng: np.random.Generator) -> None:
        model = Detector(tiny_net_cfg)
        pixels = rng.uniform(0, 255, (1, 3, 256, 32, 32))
        features = model.extract(pixels)
        model.clear_cache()
        direct = model(pixels=pixels)
        bypass = model(features=features)
        for a, b in zip(direct.cls_levels + direct.reg_levels, bypass.cls_levels + bypass.reg_levels):
            assert np.allclose(a, b)

    def test_deterministic(self, tiny_net_cfg: NetConfig, rng: np.random.Generator) -> None:
        features = rng.standard_normal((2, 4, 32))
        first = Detector(tiny_net_cfg).eval()(features=features)
        second = Detector(tiny_net_cfg).eval()(features=features)
        assert all(np.array_equal(a, b) for a, b in zip(first.cls_levels, second.cls_levels))

    def test_flatten_order(self, tiny_model: Detector, rng: np.random.Generator) -> None:
        output = tiny_model(features=rng.standard_normal((1, 4, 16)))
        cls, reg = tiny_model.flatten(output)
        k = tiny_model.num_classes
        # level 0, position 5, anchor 2, class 1
        assert cls[0, 5 * 3 + 2, 1] == output.cls_levels[0][0, 2 * k + 1, 5]
        assert reg[0, 5 * 3 + 2, 0] == output.reg_levels[0][0, 2 * 2 + 0, 5]

    def test_unflatten_inverts_flatten(self, tiny_model: Detector, rng: np.random.Generator) -> None:
        output = tiny_model(features=rng.standard_normal((2, 4, 16)))
        back = tiny_model.unflatten(*tiny_model.flatten(output), output.temporal_sizes)
        for a, b in zip(output.cls_levels + output.reg_levels, back.cls_levels + back.reg_levels):
            assert np.array_equal(a, b)

    def test_exactly_one_input(self, tiny_model: Detector) -> None:
        with pytest.raises(ValueError, match="exactly one"):
            tiny_model()

    def test_feature_width_checked(self, tiny_model: Detector) -> None:
        with pytest.raises(ShapeError, match="feature sequence"):
            tiny_model(features=np.zeros((1, 5, 16)))

    def test_backward_without_forward(self, tiny_model: Detector) -> None:
        output = tiny_model.eval()(features=np.zeros((1, 4, 16)))
        tiny_model.train()
        with pytest.raises(RuntimeError, match="without a matching"):
            tiny_model.backward(output)
