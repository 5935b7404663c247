"""Per-channel int8 weight-only quantization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balab import tensor as T
from balab.model import ModelConfig, MultimodalModel
from balab.nn import Linear
from balab.quant import QuantLinear, dequantize_rows, linear_bytes, quantize_rows
from balab.tensor import Tensor


class TestRoundTrip:
    def test_hand_row(self):
        q, s = quantize_rows(np.array([[0.0, 1.27]]))
        assert s[0] == pytest.approx(0.01)
        np.testing.assert_array_equal(q, [[0, 127]])

    def test_zero_row_gets_unit_scale(self):
        q, s = quantize_rows(np.zeros((1, 3)))
        assert s[0] == 1.0 and not q.any()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 12), st.integers(1, 12), st.floats(1e-3, 1e3))
    def test_error_within_half_step(self, seed, rows, cols, mag):
        w = np.random.default_rng(seed).standard_normal((rows, cols)) * mag
        q, s = quantize_rows(w)
        err = np.abs(w - dequantize_rows(q, s))
        assert np.all(err <= s[:, None] / 2 * (1 + 1e-12))
        assert q.dtype == np.int8 and np.abs(q).max() <= 127

    def test_quant_linear_matches_dequantized_dense(self):
        rng = np.random.default_rng(0)
        lin = Linear(rng.standard_normal((5, 4)), rng.standard_normal(5))
        ql = QuantLinear.from_linear(lin)
        x = rng.standard_normal((3, 4))
        np.testing.assert_allclose(ql(Tensor(x)).data, x @ ql.dense_weight().T + lin.bias.data, atol=1e-12)


class TestBytes:
    def test_formula(self):
        assert linear_bytes(10, 20, False) == (800, 200 + 40)
        assert linear_bytes(10, 20, True) == (840, 280)

    def test_report_sums_layers(self):
        m = MultimodalModel(ModelConfig())
        rep = m.memory
        names = m.tensors()
        for layer in rep.layers:
            has_bias = f"{layer.name}.bias" in names
            assert (layer.float_bytes, layer.quant_bytes) == linear_bytes(*layer.shape, has_bias)
        assert rep.float_bytes == sum(layer.float_bytes for layer in rep.layers) + rep.other_bytes
        assert rep.reduction > 1.0


class TestModelLogits:
    def test_quantized_logits_close_to_float(self):
        fq = MultimodalModel(ModelConfig())
        ff = MultimodalModel(ModelConfig(quantize_backbone=False))
        rng = np.random.default_rng(0)
        worst = 0.0
        with T.no_grad():
            for i in range(100):
                img = (rng.random((16, 16, 3)) < 0.2).astype(np.float32) if i % 2 == 0 else None
                tokens = [int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 10)))]
                a, b = fq.forward(img, tokens).data, ff.forward(img, tokens).data
                worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
        assert worst <= 3e-2
