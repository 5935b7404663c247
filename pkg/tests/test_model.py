"""Encoder, neck, fusion and decoder: shapes, causality, identity at init."""

import numpy as np
import pytest

from balab import tensor as T
from balab.adapters import FAMILIES, AdapterSpec
from balab.errors import ConfigError, DimensionError, InputError
from balab.model import ModelConfig, MultimodalModel, PlacementPolicy, fuse, preset, visual_neck
from balab.tensor import Tensor


@pytest.fixture(scope="module")
def model():
    return MultimodalModel(ModelConfig())


@pytest.fixture(scope="module")
def baseline():
    return MultimodalModel(ModelConfig(adapter=None))


def _inputs(seed):
    rng = np.random.default_rng(seed)
    img = (rng.random((16, 16, 3)) < 0.2).astype(np.float32) if seed % 2 == 0 else None
    tokens = [int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 12)))]
    return img, tokens


class TestShapes:
    def test_visual_tokens_every_fourth_layer(self, model):
        V = model.encode_image(np.zeros((16, 16, 3), np.float32))
        assert V.shape == (2, 64)
        assert model.visual_tokens(np.zeros((16, 16, 3), np.float32)).shape == (2, 64)

    def test_logit_rows_cover_fused_sequence(self, model):
        img, _ = _inputs(0)
        assert model.forward(img, [3, 4, 5]).shape == (1 + 2 + 3, 64)
        assert model.forward(None, [3, 4, 5]).shape == (1 + 3, 64)

    def test_neck_hand_shapes(self):
        rng = np.random.default_rng(0)
        out = visual_neck(*(Tensor(rng.standard_normal(s)) for s in [(2, 8), (8, 4), (4,), (4, 6), (6,)]))
        assert out.shape == (2, 6)

    def test_neck_shape_mismatch(self):
        with pytest.raises(DimensionError):
            visual_neck(*(Tensor(np.ones(s)) for s in [(2, 8), (7, 4), (4,), (4, 6), (6,)]))

    def test_fuse_width_mismatch(self):
        with pytest.raises(DimensionError):
            fuse(Tensor(np.ones((1, 4))), None, Tensor(np.ones((2, 5))))

    def test_wrong_image_shape(self, model):
        with pytest.raises(InputError):
            model.encode_image(np.zeros((8, 8, 3), np.float32))

    def test_sequence_too_long(self, model):
        with pytest.raises(InputError):
            model.forward(None, [3] * 40)


class TestIdentityAtInit:
    def test_logits_bitwise_equal_to_baseline(self, model, baseline):
        for seed in range(100):
            img, tokens = _inputs(seed)
            with T.no_grad():
                a = model.forward(img, tokens).data
                b = baseline.forward(img, tokens).data
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_every_family(self, family, baseline):
        m = MultimodalModel(ModelConfig(adapter=AdapterSpec(family=family, rank=4)))
        img, tokens = _inputs(0)
        with T.no_grad():
            np.testing.assert_array_equal(m.forward(img, tokens).data, baseline.forward(img, tokens).data)


class TestCausality:
    @pytest.mark.parametrize("family", ["bottleneck", "router_mixture", "loha_routed"])
    def test_future_tokens_do_not_move_past_logits(self, family):
        m = MultimodalModel(ModelConfig(adapter=AdapterSpec(family=family, rank=4)))
        rng = np.random.default_rng(1)
        for p in m.trainable().values():
            p.data = rng.standard_normal(p.shape).astype(p.dtype) * 0.3
        img, _ = _inputs(0)
        with T.no_grad():
            a = m.forward(img, [3, 4, 5, 6]).data
            b = m.forward(img, [3, 4, 9, 10]).data
        np.testing.assert_allclose(a[:5], b[:5], atol=1e-6)
        assert np.abs(a[5:] - b[5:]).max() > 1e-4


class TestPartition:
    def test_only_adapters_neck_and_prefix_train(self, model):
        names = model.trainable().keys()
        assert all(n.split(".")[0] in {"encoder", "lm", "neck", "prefix"} for n in names)
        assert all("adapter" in n for n in names if n.startswith(("encoder", "lm")))

    def test_trainable_fraction_small(self, model):
        part = model.partition()
        assert part.trainable_count / part.total_count < 0.10
        assert part.total_count == model.num_params()

    def test_backbone_quantized(self, model):
        q = [n for n in model.frozen() if n.endswith("q_weight")]
        assert q and all(model.frozen()[n].dtype == np.int8 for n in q)

    def test_adapter_free_model_has_no_adapter_tensors(self, baseline):
        assert not any("adapter" in n for n in baseline.tensors())


class TestConfig:
    def test_round_trip(self):
        cfg = ModelConfig(adapter=AdapterSpec(family="concat"), placement=PlacementPolicy(vit_sites=("before_mha",)))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_fingerprint_tracks_config(self):
        assert ModelConfig().fingerprint() == ModelConfig().fingerprint()
        assert ModelConfig().fingerprint() != ModelConfig(seed=1).fingerprint()

    @pytest.mark.parametrize("kwargs,field", [
        (dict(neck_dim=64), "model.neck_dim"),
        (dict(cls_stride=3), "model.cls_stride"),
        (dict(lm_heads=3), "model.lm_heads"),
        (dict(vit_adapter_scale=0.0), "model.vit_adapter_scale"),
        (dict(neck_gain_v=0.0), "model.neck_gain_v"),
        (dict(neck_gain_t=-1.0), "model.neck_gain_t"),
        (dict(head_std=0.0), "model.head_std"),
    ])
    def test_invalid_fields_named(self, kwargs, field):
        with pytest.raises(ConfigError) as e:
            ModelConfig(**kwargs)
        assert e.value.field == field

    def test_adapter_groups_error_names_field(self):
        with pytest.raises(ConfigError) as e:
            ModelConfig.from_dict({"adapter": {"groups": 3}})
        assert e.value.field == "model.adapter.groups"

    def test_presets_apply(self):
        assert preset(lm="llama2").lm_layers == 4

    def test_same_seed_same_weights(self):
        a, b = MultimodalModel(ModelConfig()), MultimodalModel(ModelConfig())
        for (n, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
            np.testing.assert_array_equal(x.data, y.data, err_msg=n)

    def test_float64_cast(self):
        m = MultimodalModel(ModelConfig(quantize_backbone=False)).to(np.float64)
        assert m.forward(None, [3, 4]).dtype == np.float64
