import numpy as np
import pytest

from polyformer.engine import DimensionError, Tensor
from polyformer.nn import set_bn_mode
from polyformer.unet import UNetConfig, build_unet, extract_features, predict_mask, segment

SMALL = UNetConfig(depth=1, base_channels=4)


def batch(shape=(2, 3, 16, 16), seed=0):
    return Tensor(np.random.default_rng(seed).random(shape))


class TestShapes:
    @pytest.mark.parametrize("depth", [1, 2])
    def test_feature_and_logit_shapes(self, depth):
        cfg = UNetConfig(depth=depth, base_channels=4)
        model = build_unet(cfg)
        f = extract_features(model, batch())
        assert f.shape == (2, cfg.feature_dim, 16, 16)
        assert segment(model, f).shape == (2, cfg.num_classes, 16, 16)

    def test_wrong_channels(self):
        with pytest.raises(DimensionError, match="input"):
            build_unet(SMALL)(batch((1, 1, 16, 16)))

    def test_indivisible_size(self):
        with pytest.raises(DimensionError, match="divisible"):
            build_unet(UNetConfig(depth=2, base_channels=4))(batch((1, 3, 18, 18)))

    def test_head_width_check(self):
        model = build_unet(SMALL)
        with pytest.raises(DimensionError):
            segment(model, batch((1, 5, 8, 8)))

    @pytest.mark.parametrize("kwargs", [{"depth": 0}, {"num_classes": 1}, {"base_channels": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            UNetConfig(**kwargs)


class TestSplit:
    def test_composition_matches_forward(self):
        model = build_unet(SMALL)
        set_bn_mode(model, "eval")
        x = batch()
        np.testing.assert_array_equal(model(x).data, segment(model, extract_features(model, x)).data)

    def test_same_seed_same_weights(self):
        a, b = build_unet(SMALL, seed=3).state_dict(), build_unet(SMALL, seed=3).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seed(self):
        a, b = build_unet(SMALL, seed=3).state_dict(), build_unet(SMALL, seed=4).state_dict()
        assert any(a[k].tobytes() != b[k].tobytes() for k in a if k.endswith("weight"))

    def test_names_are_dotted_paths(self):
        names = [p.name for p in build_unet(SMALL).parameters()]
        assert "backbone.m1.inc.c1.conv.weight" in names
        assert "backbone.m2.conv.bias" in names
        assert len(set(names)) == len(names)


def test_predict_mask_ties_to_lowest_class():
    logits = np.zeros((1, 3, 2, 2))
    logits[0, 2, 0, 0] = 1.0
    logits[0, 1, 1, 1] = logits[0, 2, 1, 1] = 2.0
    np.testing.assert_array_equal(predict_mask(logits)[0], [[2, 0], [0, 1]])
