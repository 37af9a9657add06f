import numpy as np
import pytest

from dsdistill.attention import (TapSet, attention_map, attention_map_backward,
                                 build_taps, residual_attention)
from dsdistill.tensor_ops import GradPair, finite_diff_check, l2_normalize


def _pixel(vals):
    """Feature map with one spatial site and the given channel values."""
    return np.array(vals, dtype=float).reshape(-1, 1, 1)


class TestAttentionMap:
    def test_sum_squares(self):
        assert attention_map(_pixel([3.0, 4.0]))[0, 0] == 25.0

    def test_max_squares(self):
        assert attention_map(_pixel([3.0, 4.0]), "max")[0, 0] == 16.0

    def test_single_channel_is_square(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((1, 4, 5))
        np.testing.assert_allclose(attention_map(a), a[0] ** 2)

    def test_channel_permutation_invariant(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((6, 3, 4))
        perm = rng.permutation(6)
        np.testing.assert_allclose(attention_map(a), attention_map(a[perm]),
                                   atol=1e-12)

    def test_odd_power_uses_absolute_values(self):
        out = attention_map(_pixel([-2.0]), "sum", 3.0)
        assert out[0, 0] == pytest.approx(8.0)

    def test_rejects_power_below_one(self):
        with pytest.raises(ValueError):
            attention_map(_pixel([1.0]), "sum", 0.5)

    def test_scaling_squares(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((3, 4, 4))
        np.testing.assert_allclose(attention_map(3.0 * a), 9.0 * attention_map(a))

    def test_backward_sum_and_max(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((3, 2, 2))
        u = rng.standard_normal((2, 2))
        for mode in ("sum", "max"):
            def f(xs, mode=mode):
                out = attention_map(xs["a"], mode)
                return GradPair(float(np.sum(out * u)),
                                {"a": attention_map_backward(xs["a"], u, mode)})

            assert finite_diff_check(f, {"a": a}, h=1e-4) < 1e-6


class TestResidualAttention:
    def test_identical_inputs_cancel(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 3, 3))
        np.testing.assert_array_equal(residual_attention(a, a), np.zeros((3, 3)))

    def test_hand_example(self):
        # attention maps (3, 4) and (1, 0) on a 1x2 grid:
        # normalized to (0.6, 0.8) and (1, 0), difference (-0.4, 0.8)
        a_m = np.sqrt(np.array([3.0, 4.0])).reshape(1, 1, 2)
        a_n = np.array([1.0, 0.0]).reshape(1, 1, 2)
        np.testing.assert_allclose(residual_attention(a_m, a_n),
                                   [[-0.4, 0.8]], atol=1e-12)

    def test_channel_count_may_differ(self):
        # 8 vs 4 channels with identical per-pixel square sums
        rng = np.random.default_rng(5)
        base = rng.random((4, 3, 3)) + 0.5
        wide = np.concatenate([base, base], axis=0) / np.sqrt(2.0)
        np.testing.assert_allclose(residual_attention(wide, base),
                                   np.zeros((3, 3)), atol=1e-12)

    def test_antisymmetry(self):
        rng = np.random.default_rng(6)
        a, b = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(residual_attention(a, b),
                                   -residual_attention(b, a), atol=1e-15)

    def test_norm_at_most_two(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = rng.standard_normal((2, 4, 4)) * 10.0 ** rng.integers(-3, 4)
            b = rng.standard_normal((3, 4, 4)) * 10.0 ** rng.integers(-3, 4)
            ra = residual_attention(a, b)
            assert np.linalg.norm(ra) <= 2.0 + 1e-12

    def test_rescaling_input_invariance(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_allclose(residual_attention(7.5 * a, 0.3 * b),
                                   residual_attention(a, b), atol=1e-12)

    def test_mismatched_sizes_use_larger_grid(self):
        rng = np.random.default_rng(9)
        small = rng.standard_normal((2, 2, 2))
        large = rng.standard_normal((2, 4, 6))
        assert residual_attention(small, large).shape == (4, 6)
        assert residual_attention(large, small).shape == (4, 6)

    def test_resize_happens_before_normalization(self):
        rng = np.random.default_rng(10)
        small = rng.random((1, 2, 2)) + 0.1
        large = rng.random((1, 4, 4)) + 0.1
        from dsdistill.tensor_ops import resize_bilinear
        f_small = resize_bilinear(attention_map(small), 4, 4)
        expected = l2_normalize(attention_map(large)) - l2_normalize(f_small)
        np.testing.assert_allclose(residual_attention(large, small), expected,
                                   atol=1e-12)


class TestTapSet:
    def _three(self):
        rng = np.random.default_rng(11)
        return [(name, rng.standard_normal((2, 3, 3)))
                for name in ("backbone", "head", "logits")]

    def test_adjacent_pairs(self):
        ts = build_taps(self._three(), "adjacent")
        assert ts.pairs == [(1, 0), (2, 1)]

    def test_all_pairs(self):
        ts = build_taps(self._three(), "all-pairs")
        assert ts.pairs == [(1, 0), (2, 1), (2, 0)]

    def test_two_taps_adjacent(self):
        ts = build_taps(self._three()[1:], "adjacent")
        assert ts.pairs == [(1, 0)]

    def test_explicit_pairs(self):
        ts = build_taps(self._three(), explicit_pairs=[("logits", "backbone")])
        assert ts.pairs == [(2, 0)]

    def test_explicit_missing_tap_rejected(self):
        with pytest.raises(ValueError):
            build_taps(self._three(), explicit_pairs=[("logits", "stem")])

    def test_explicit_wrong_order_rejected(self):
        with pytest.raises(ValueError):
            build_taps(self._three(), explicit_pairs=[("backbone", "logits")])

    def test_needs_two_taps(self):
        with pytest.raises(ValueError):
            build_taps(self._three()[:1], "adjacent")

    def test_residual_maps_keys(self):
        ts = build_taps(self._three(), "adjacent")
        assert sorted(ts.residual_maps()) == ["head-backbone", "logits-head"]

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            build_taps(self._three(), "rings")

    def test_bad_pair_indices_rejected(self):
        taps = self._three()
        with pytest.raises(ValueError):
            TapSet(taps=taps, pairs=[(0, 0)])
        with pytest.raises(ValueError):
            TapSet(taps=taps, pairs=[(1, 2)])
