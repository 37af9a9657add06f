import numpy as np
import pytest

from dsdistill.tensor_ops import (EPS, GradPair, finite_diff_check,
                                  l2_normalize, l2_normalize_backward,
                                  resize_bilinear, resize_bilinear_backward,
                                  softmax_over_channels)


class TestL2Normalize:
    def test_three_four(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])),
                                   [0.6, 0.8], atol=1e-15)

    def test_zero_vector_guard(self):
        out = l2_normalize(np.zeros(2))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_unit_vector_fixed_point(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(v), v, atol=1e-15)

    def test_norm_is_one_or_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            v = rng.standard_normal(rng.integers(1, 30)) * 10.0 ** rng.integers(-6, 6)
            n = np.linalg.norm(l2_normalize(v))
            if np.linalg.norm(v) > EPS:
                assert abs(n - 1.0) < 1e-9
            else:
                assert n == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            l2_normalize(np.ones(3), eps=0.0)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(6)
        u = rng.standard_normal(6)

        def f(xs):
            out = l2_normalize(xs["v"])
            return GradPair(float(out @ u), {"v": l2_normalize_backward(xs["v"], u)})

        assert finite_diff_check(f, {"v": v}, h=1e-4) < 1e-6


class TestSoftmaxOverChannels:
    def test_symmetry(self):
        z = np.zeros((2, 1, 1))
        np.testing.assert_allclose(softmax_over_channels(z, 3.7).ravel(), [0.5, 0.5])

    def test_ln4(self):
        z = np.array([np.log(4.0), 0.0]).reshape(2, 1, 1)
        np.testing.assert_allclose(softmax_over_channels(z, 1.0).ravel(),
                                   [0.8, 0.2], atol=1e-12)

    def test_high_temperature_flattens(self):
        z = np.array([np.log(4.0), 0.0]).reshape(2, 1, 1)
        np.testing.assert_allclose(softmax_over_channels(z, 1e6).ravel(),
                                   [0.5, 0.5], atol=1e-5)

    def test_sites_sum_to_one(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((5, 4, 6)) * 50
        q = softmax_over_channels(z, 2.0)
        np.testing.assert_allclose(q.sum(axis=0), np.ones((4, 6)), atol=1e-12)
        assert (q > 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal((4, 3, 3))
        shift = rng.standard_normal((1, 3, 3))
        np.testing.assert_allclose(softmax_over_channels(z + shift, 3.0),
                                   softmax_over_channels(z, 3.0), atol=1e-12)

    def test_overflow_safe(self):
        z = np.array([1e6, 0.0]).reshape(2, 1, 1)
        q = softmax_over_channels(z, 1.0)
        assert np.isfinite(q).all()

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            softmax_over_channels(np.zeros((2, 1, 1)), 0.0)


class TestResizeBilinear:
    def test_identity(self):
        m = np.arange(4.0).reshape(2, 2)
        np.testing.assert_array_equal(resize_bilinear(m, 2, 2), m)

    def test_midpoint_column(self):
        m = np.array([[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_allclose(resize_bilinear(m, 2, 3),
                                   [[0.0, 0.5, 1.0], [0.0, 0.5, 1.0]])

    def test_constant_preserved(self):
        m = np.full((3, 5), 2.5)
        np.testing.assert_allclose(resize_bilinear(m, 7, 2), np.full((7, 2), 2.5))

    def test_corners_align(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((5, 7))
        out = resize_bilinear(m, 9, 4)
        for (oy, ox), (iy, ix) in zip([(0, 0), (0, 3), (8, 0), (8, 3)],
                                      [(0, 0), (0, 6), (4, 0), (4, 6)]):
            assert out[oy, ox] == pytest.approx(m[iy, ix], abs=1e-12)

    def test_bounds_preserved(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((4, 4))
        out = resize_bilinear(m, 11, 13)
        assert out.min() >= m.min() - 1e-12 and out.max() <= m.max() + 1e-12

    def test_rejects_zero_extent(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.ones((2, 2)), 0, 3)

    def test_backward_is_transpose(self):
        # <R x, y> == <x, R^T y> for random x, y
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 5))
        y = rng.standard_normal((6, 4))
        rx = resize_bilinear(x, 6, 4)
        rty = resize_bilinear_backward(y, 3, 5)
        assert np.sum(rx * y) == pytest.approx(np.sum(x * rty), rel=1e-12)


class TestFiniteDiffCheck:
    def test_sum_of_squares(self):
        def f(xs):
            x = xs["x"]
            return GradPair(float(np.sum(x * x)), {"x": 2 * x})

        err = finite_diff_check(f, {"x": np.array([1.0, 2.0])}, h=1e-3)
        assert err < 1e-6

    def test_constant_function(self):
        def f(xs):
            return GradPair(7.0, {"x": np.zeros_like(xs["x"])})

        assert finite_diff_check(f, {"x": np.ones(3)}, h=1e-3) == 0.0

    def test_catches_wrong_gradient(self):
        def f(xs):
            x = xs["x"]
            return GradPair(float(np.sum(x * x)), {"x": 3 * x})

        assert finite_diff_check(f, {"x": np.array([1.0, 2.0])}, h=1e-3) > 0.1
