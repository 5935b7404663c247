"""Adapter families: oracles, parameter counts, identity at init, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balab import adapters as A
from balab import tensor as T
from balab.adapters import Adapter, AdapterSpec, count_params
from balab.errors import DimensionError, SpecError
from balab.tensor import Tensor, grad_check_tensors


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _random_params(spec, seed):
    rng = np.random.default_rng(seed)
    raw = A.init_params(spec, rng, np.float64)
    return {k: rng.standard_normal(v.shape) * 0.5 for k, v in raw.items()}


class TestGroupedLinear:
    def test_hand_example(self):
        Z = _t([[1, 2, 3, 4]])
        blocks = [_t([[1], [1]]), _t([[1], [2]])]
        out = A.grouped_linear(Z, blocks, _t([0, 4]))
        np.testing.assert_array_equal(out.data, [[3, 15]])

    def test_single_group_equals_dense(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            n, ci, co = rng.integers(1, 6, size=3)
            Z, W, b = rng.standard_normal((n, ci)), rng.standard_normal((ci, co)), rng.standard_normal(co)
            out = A.grouped_linear(_t(Z), [_t(W)], _t(b)).data
            worst = max(worst, np.abs(out - (Z @ W + b)).max())
        assert worst <= 1e-12

    def test_equals_block_diagonal_dense(self):
        rng = np.random.default_rng(1)
        blocks = [rng.standard_normal((2, 3)) for _ in range(4)]
        dense = np.zeros((8, 12))
        for i, b in enumerate(blocks):
            dense[2 * i:2 * i + 2, 3 * i:3 * i + 3] = b
        Z = rng.standard_normal((5, 8))
        out = A.grouped_linear(_t(Z), [_t(b) for b in blocks], _t(np.zeros(12))).data
        np.testing.assert_allclose(out, Z @ dense, atol=1e-12)

    def test_indivisible_groups_raise(self):
        with pytest.raises(SpecError):
            A.grouped_linear(_t(np.ones((1, 5))), [_t(np.ones((2, 1)))] * 2, _t(np.zeros(2)))


class TestLoha:
    def test_hand_example(self):
        W = A.loha_compose(_t([[1], [2]]), _t([[3], [1]]), _t([[1], [1]]), _t([[1], [2]]))
        np.testing.assert_array_equal(W.data, [[3, 2], [6, 4]])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            c, r = rng.integers(1, 9, size=2)
            X1, Y1, X2, Y2 = (rng.standard_normal((c, r)) for _ in range(4))
            W = A.loha_compose(_t(X1), _t(Y1), _t(X2), _t(Y2)).data
            brute = np.array([[(X1[i] @ Y1[j]) * (X2[i] @ Y2[j]) for j in range(c)] for i in range(c)])
            worst = max(worst, np.abs(W - brute).max())
        assert worst <= 1e-10

    def test_rank_mismatch_raises(self):
        with pytest.raises(SpecError):
            A.loha_compose(_t(np.ones((2, 1))), _t(np.ones((2, 2))), _t(np.ones((2, 1))), _t(np.ones((2, 1))))


class TestRouting:
    @pytest.mark.parametrize("tau,expected", [(1.0, (0.88079708, 0.11920292)), (10.0, (0.549834, 0.450166))])
    def test_two_logit_softmax(self, tau, expected):
        Z = _t([[1.0, 0.0]])
        router = _t([[2.0, 0.0], [0.0, 0.0]])
        w = A.route_weights(Z, router, _t([0.0, 0.0]), tau).data
        np.testing.assert_allclose(w[0], expected, atol=1e-6)

    def test_huge_temperature_is_uniform(self):
        rng = np.random.default_rng(13)
        w = A.route_weights(_t(rng.standard_normal((4, 8)) * 10), _t(rng.standard_normal((8, 2))),
                            _t(rng.standard_normal(2)), 1e9).data
        assert np.abs(w - 0.5).max() < 1e-6

    def test_nonpositive_temperature_raises(self):
        with pytest.raises(SpecError):
            A.route_weights(_t([[1.0]]), _t([[1.0, 0.0]]), _t([0.0, 0.0]), 0.0)

    def test_causal_routes_match_prefix_means(self):
        rng = np.random.default_rng(3)
        Z, R, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
        causal = A.route_weights(_t(Z), _t(R), _t(b), 10.0, causal=True).data
        for t in range(5):
            ref = A.route_weights(_t(Z[:t + 1]), _t(R), _t(b), 10.0).data
            np.testing.assert_allclose(causal[t], ref[0], atol=1e-12)


class TestParamCounts:
    def test_grouped_bottleneck_1616(self):
        spec = AdapterSpec(channel_dim=64, bottleneck_dim=16, groups=2)
        assert count_params(spec) == 1616
        assert sum(p.size for p in Adapter(spec).params.values()) == 1616

    def test_dense_bottleneck_2128(self):
        assert count_params(AdapterSpec(channel_dim=64, bottleneck_dim=16, groups=1)) == 2128

    def test_loha_plain_1024(self):
        assert count_params(AdapterSpec(family="loha_plain", channel_dim=32, rank=8)) == 1024

    @pytest.mark.parametrize("family", A.FAMILIES)
    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_formula_matches_constructed_shapes(self, family, groups):
        spec = AdapterSpec(family=family, channel_dim=64, bottleneck_dim=16, groups=groups, rank=4)
        assert count_params(spec) == sum(p.size for p in Adapter(spec).params.values())

    def test_strictly_decreasing_in_groups(self):
        counts = [count_params(AdapterSpec(channel_dim=64, bottleneck_dim=16, groups=k)) for k in (1, 2, 4, 8, 16)]
        assert all(a > b for a, b in zip(counts, counts[1:]))


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(groups=3), dict(bottleneck_dim=64), dict(bottleneck_dim=0), dict(family="lora"),
        dict(route_temperature=0.0), dict(groups=True),
    ])
    def test_invalid_specs_raise(self, kwargs):
        with pytest.raises(SpecError):
            AdapterSpec(**kwargs)

    def test_round_trip_dict(self):
        spec = AdapterSpec(family="loha_routed", rank=4, scale=0.5)
        assert AdapterSpec.from_dict(spec.to_dict()) == spec

    def test_wrong_width_raises(self):
        with pytest.raises(DimensionError):
            Adapter(AdapterSpec())(Tensor(np.ones((2, 32), np.float32)))


class TestIdentityAtInit:
    @pytest.mark.parametrize("family", A.FAMILIES)
    @pytest.mark.parametrize("causal", [False, True])
    def test_fresh_adapter_is_identity(self, family, causal):
        ad = Adapter(AdapterSpec(family=family, channel_dim=16, bottleneck_dim=4, rank=2), causal=causal)
        rng = np.random.default_rng(4)
        for _ in range(20):
            Z = rng.standard_normal((int(rng.integers(1, 7)), 16)).astype(np.float32)
            np.testing.assert_array_equal(ad(Tensor(Z)).data, Z)


class TestScale:
    def test_scale_multiplies_residual_branch(self):
        spec = AdapterSpec(channel_dim=8, bottleneck_dim=4, groups=2, scale=1.0)
        params = _random_params(spec, 5)
        full = Adapter(spec, params=params, dtype=np.float64)
        half = Adapter(AdapterSpec(channel_dim=8, bottleneck_dim=4, groups=2, scale=0.25), params=params)
        Z = np.random.default_rng(6).standard_normal((3, 8))
        delta_full = full(_t(Z)).data - Z
        np.testing.assert_allclose(half(_t(Z)).data - Z, 0.25 * delta_full, atol=1e-12)

    def test_unit_scale_matches_functional_form(self):
        spec = AdapterSpec(channel_dim=8, bottleneck_dim=4, groups=2, scale=1.0)
        params = _random_params(spec, 7)
        Z = _t(np.random.default_rng(8).standard_normal((3, 8)))
        ref = A.bottleneck_forward(Z, {k: _t(v) for k, v in params.items()})
        np.testing.assert_array_equal(Adapter(spec, params=params)(Z).data, ref.data)


class TestCausality:
    @pytest.mark.parametrize("family", A.FAMILIES)
    def test_causal_adapter_rows_ignore_future(self, family):
        spec = AdapterSpec(family=family, channel_dim=8, bottleneck_dim=4, rank=2, scale=1.0)
        ad = Adapter(spec, params=_random_params(spec, 9), causal=True)
        rng = np.random.default_rng(10)
        Z = rng.standard_normal((6, 8))
        Z2 = Z.copy()
        Z2[4:] = rng.standard_normal((2, 8))
        np.testing.assert_allclose(ad(_t(Z)).data[:4], ad(_t(Z2)).data[:4], atol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("family", A.FAMILIES)
    def test_family_gradients(self, family):
        spec = AdapterSpec(family=family, channel_dim=16, bottleneck_dim=8, groups=2, rank=4, scale=1.0)
        ad = Adapter(spec, params=_random_params(spec, 11))
        Z = Tensor(np.random.default_rng(12).standard_normal((3, 16)), requires_grad=True)
        f = lambda: T.sum(T.silu(ad(Z)))
        assert grad_check_tensors(f, [Z, *ad.params.values()]) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([(64, 16, 1), (64, 16, 2), (64, 16, 4), (32, 8, 2), (16, 4, 4)]))
    def test_grouped_count_closed_form(self, cdk):
        c, d, k = cdk
        assert count_params(AdapterSpec(channel_dim=c, bottleneck_dim=d, groups=k)) == c * d + d + d * c // k + c
