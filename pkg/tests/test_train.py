"""Optimizer updates, top-p decoding and the training loop."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balab.errors import ConfigError, InputError, NumericError
from balab.model import ModelConfig, MultimodalModel
from balab.tasks import TaskSpec, make_dataset
from balab.tensor import Tensor
from balab.train import (
    AdamState, SampleConfig, TrainConfig, adam_step, adamw_step, clip_grad_norm, generate, top_p_filter,
    top_p_sample, train,
)


def _param(value, grad):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


class TestAdamW:
    def test_first_step_without_decay(self):
        p = _param([1.0], [1.0])
        adamw_step({"w": p}, AdamState(), lr=0.1, weight_decay=0.0)
        assert abs(p.data[0] - (1 - 0.1 / (1 + 1e-8))) < 1e-15
        assert abs(p.data[0] - 0.9) < 1e-9

    def test_first_step_with_decay(self):
        p = _param([1.0], [1.0])
        adamw_step({"w": p}, AdamState(), lr=0.1, weight_decay=0.02)
        assert abs(p.data[0] - 0.898) < 1e-9

    def test_zero_gradient_zero_update(self):
        p = _param([1.0], [0.0])
        adamw_step({"w": p}, AdamState(), lr=0.1, weight_decay=0.0)
        assert p.data[0] == 1.0

    def test_zero_decay_equals_adam_bitwise(self):
        rng = np.random.default_rng(0)
        a = _param(rng.standard_normal(5), np.zeros(5))
        b = _param(a.data.copy(), np.zeros(5))
        sa, sb = AdamState(), AdamState()
        for _ in range(20):
            g = rng.standard_normal(5)
            a.grad, b.grad = g.copy(), g.copy()
            adamw_step({"w": a}, sa, lr=0.01, weight_decay=0.0)
            adam_step({"w": b}, sb, lr=0.01, weight_decay=0.0)
        np.testing.assert_array_equal(a.data, b.data)

    def test_decay_is_decoupled_from_moments(self):
        p = _param([2.0], [0.0])
        adamw_step({"w": p}, AdamState(), lr=0.1, weight_decay=0.5)
        assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12

    def test_nonfinite_gradient_raises(self):
        with pytest.raises(NumericError):
            adamw_step({"w": _param([1.0], [np.nan])}, AdamState(), lr=0.1)

    def test_missing_gradient_leaves_param(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        adamw_step({"w": p}, AdamState(), lr=0.1, weight_decay=0.1)
        assert p.data[0] == 1.0

    def test_clip_grad_norm(self):
        p = _param([0.0, 0.0], [3.0, 4.0])
        assert clip_grad_norm({"w": p}, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8], atol=1e-9)


class TestTopP:
    def test_hand_example(self):
        ids, kept = top_p_filter(np.array([0.5, 0.3, 0.2]), 0.75)
        assert list(ids) == [0, 1]
        assert kept.tolist() == [0.625, 0.375]

    def test_top_p_one_keeps_everything(self):
        ids, _ = top_p_filter(np.array([0.1, 0.6, 0.3]), 1.0)
        assert sorted(ids) == [0, 1, 2]

    def test_ties_broken_by_id(self):
        ids, _ = top_p_filter(np.array([0.25, 0.25, 0.25, 0.25]), 0.5)
        assert list(ids) == [0, 1]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.01, 1.0))
    def test_kept_set_is_minimal_prefix(self, seed, top_p):
        probs = np.random.default_rng(seed).dirichlet(np.ones(8))
        ids, kept = top_p_filter(probs, top_p)
        mass = probs[ids].sum()
        assert mass >= top_p - 1e-12 or len(ids) == probs.size
        assert mass - probs[ids[-1]] < top_p
        assert probs[ids].min() >= np.delete(probs, ids).max(initial=0.0)
        assert abs(kept.sum() - 1.0) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.01, 1.0))
    def test_renormalization_is_correctly_rounded(self, seed, top_p):
        probs = np.random.default_rng(seed).dirichlet(np.ones(8))
        ids, kept = top_p_filter(probs, top_p)
        total = sum(Fraction(p) for p in probs[ids].tolist())
        assert kept.tolist() == [float(Fraction(p) / total) for p in probs[ids].tolist()]

    def test_frequencies_within_three_sigma(self):
        logits = np.log([0.5, 0.3, 0.2])
        cfg = SampleConfig(temperature=1.0, top_p=0.75)
        rng = np.random.default_rng(0)
        n = 100_000
        draws = np.array([top_p_sample(logits, cfg, rng) for _ in range(n)])
        assert not np.any(draws == 2)
        for tok, p in [(0, 0.625), (1, 0.375)]:
            sigma = np.sqrt(n * p * (1 - p))
            assert abs((draws == tok).sum() - n * p) < 3 * sigma

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000))
    def test_zero_temperature_is_argmax(self, seed):
        logits = np.random.default_rng(seed).standard_normal(10)
        tok = top_p_sample(logits, SampleConfig(temperature=0.0), np.random.default_rng(seed))
        assert tok == int(np.argmax(logits))

    def test_nonfinite_logits_raise(self):
        with pytest.raises(NumericError):
            top_p_sample(np.array([0.0, np.inf]), SampleConfig(), np.random.default_rng(0))


class TestConfigs:
    @pytest.mark.parametrize("kwargs", [dict(lr=0), dict(epochs=0), dict(batch_size=0), dict(weight_decay=-1)])
    def test_bad_train_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [dict(temperature=-1), dict(top_p=0), dict(top_p=1.5)])
    def test_bad_sample_config(self, kwargs):
        with pytest.raises(ConfigError):
            SampleConfig(**kwargs)

    def test_defaults(self):
        t, s = TrainConfig(), SampleConfig()
        assert (t.lr, t.weight_decay, t.batch_size) == (0.009, 0.02, 1)
        assert (s.temperature, s.top_p) == (0.1, 0.75)


TINY_MODEL = dict(enc_layers=2, cls_stride=1, enc_dim=32, enc_ffn_dim=64, lm_layers=1, lm_dim=32, lm_ffn_dim=64,
                  neck_dim=8)


class TestLoopAndDecoding:
    def test_all_frozen_training_is_noop(self):
        from balab.adapters import AdapterSpec

        m = MultimodalModel(ModelConfig(adapter=AdapterSpec(bottleneck_dim=8), **TINY_MODEL))
        for t in m.trainable().values():
            t.requires_grad = False
        before = {k: t.data.copy() for k, t in m.tensors().items()}
        data, _ = make_dataset(TaskSpec(train_size=6, eval_size=2))
        train(m, data, TrainConfig(epochs=1))
        for k, t in m.tensors().items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_memorizes_one_sample(self):
        from balab.adapters import AdapterSpec

        m = MultimodalModel(ModelConfig(adapter=AdapterSpec(bottleneck_dim=8), **TINY_MODEL))
        data, _ = make_dataset(TaskSpec(kinds=("copy_text",), train_size=1, eval_size=1))
        train(m, data * 150, TrainConfig(epochs=1))
        assert generate(m, data[0], SampleConfig(temperature=0.0)) == list(data[0].answer_tokens)

    def test_generation_contracts(self):
        m = MultimodalModel(ModelConfig(**TINY_MODEL))
        _, ev = make_dataset(TaskSpec(train_size=2, eval_size=4))
        s = ev[0]
        assert generate(m, s, SampleConfig(max_new_tokens=0)) == []
        cfg = SampleConfig(temperature=1.0, top_p=0.9, seed=3)
        assert generate(m, s, cfg) == generate(m, s, cfg)
        with pytest.raises(InputError):
            generate(m, s, SampleConfig(max_new_tokens=40))
