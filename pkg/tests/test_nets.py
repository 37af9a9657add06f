import numpy as np
import pytest

from dsdistill.losses import softmax_cross_entropy
from dsdistill.nets import (LayerSpec, SegNet, SegNetSpec, student_spec,
                            teacher_spec)


def _micro_spec():
    return SegNetSpec(in_channels=2, num_classes=3,
                      backbone=(LayerSpec(3, 3, 2),),
                      head=(LayerSpec(4, 3, 1),),
                      logits=LayerSpec(3, 1, 1, relu=False))


class TestSpecs:
    def test_default_shapes(self):
        t = teacher_spec(6)
        assert len(t.layers) == 6
        assert t.output_stride == 2
        s = student_spec(6)
        assert len(s.layers) == 3
        assert s.output_stride == 2

    def test_logits_channels_enforced(self):
        with pytest.raises(ValueError):
            SegNetSpec(in_channels=3, num_classes=4,
                       backbone=(LayerSpec(8),), head=(LayerSpec(8),),
                       logits=LayerSpec(5, 1, 1, relu=False))

    def test_head_stride_enforced(self):
        with pytest.raises(ValueError):
            SegNetSpec(in_channels=3, num_classes=2,
                       backbone=(LayerSpec(8),), head=(LayerSpec(8, 3, 2),),
                       logits=LayerSpec(2, 1, 1, relu=False))

    def test_digest_stable_and_distinct(self):
        assert teacher_spec(6).digest() == teacher_spec(6).digest()
        assert teacher_spec(6).digest() != student_spec(6).digest()


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        spec = _micro_spec()
        net = SegNet.init(spec, np.random.default_rng(0))
        net.params = [(np.zeros_like(w), np.zeros_like(b))
                      for w, b in net.params]
        logits, _ = net.forward(np.random.default_rng(1).random((2, 2, 8, 8)))
        np.testing.assert_array_equal(logits, np.zeros_like(logits))

    def test_deterministic(self):
        spec = _micro_spec()
        net1 = SegNet.init(spec, np.random.default_rng(3))
        net2 = SegNet.init(spec, np.random.default_rng(3))
        x = np.random.default_rng(4).random((2, 2, 8, 8))
        a, _ = net1.forward(x)
        b, _ = net2.forward(x)
        assert np.array_equal(a, b)

    def test_output_shapes(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(5))
        logits, taps = net.forward(np.zeros((2, 2, 16, 12)))
        assert logits.shape == (2, 3, 8, 6)
        assert taps["backbone"].shape == (2, 3, 8, 6)
        assert taps["head"].shape == (2, 4, 8, 6)
        assert taps["logits"].shape == (2, 3, 8, 6)

    def test_indivisible_size_rejected(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(6))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 2, 9, 8)))

    def test_taps_are_stable_copies(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(7))
        x1 = np.random.default_rng(8).random((1, 2, 8, 8))
        x2 = np.random.default_rng(9).random((1, 2, 8, 8))
        _, taps1 = net.forward(x1)
        saved = taps1["head"].copy()
        net.forward(x2)  # scratch buffers get reused here
        np.testing.assert_array_equal(taps1["head"], saved)


class TestBackward:
    def test_requires_cached_forward(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(10))
        with pytest.raises(RuntimeError):
            net.backward({"logits": np.zeros((1, 3, 4, 4))})
        net.forward(np.zeros((1, 2, 8, 8)), cache=False)
        with pytest.raises(RuntimeError):
            net.backward({"logits": np.zeros((1, 3, 4, 4))})

    def test_zero_upstream_gives_zero_grads(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(11))
        net.forward(np.random.default_rng(12).random((1, 2, 8, 8)), cache=True)
        grads = net.backward({"logits": np.zeros((1, 3, 4, 4))})
        for g_w, g_b in grads:
            assert not g_w.any() and not g_b.any()

    def test_single_1x1_conv_hand_gradient(self):
        # one 1x1 layer: d loss/d w[o,i] = sum over pixels of x_i * g_o
        spec = SegNetSpec(in_channels=2, num_classes=2,
                          backbone=(LayerSpec(2, 1, 1, relu=False),),
                          head=(LayerSpec(2, 1, 1, relu=False),),
                          logits=LayerSpec(2, 1, 1, relu=False))
        net = SegNet.init(spec, np.random.default_rng(13))
        # make head+logits the identity so only layer 0 matters
        eye = np.eye(2).reshape(1, 1, 2, 2)
        net.params[1] = (eye.copy(), np.zeros(2))
        net.params[2] = (eye.copy(), np.zeros(2))
        x = np.random.default_rng(14).random((1, 2, 2, 2))
        g_up = np.random.default_rng(15).random((1, 2, 2, 2))
        net.forward(x, cache=True)
        grads = net.backward({"logits": g_up})
        expected = np.einsum("bihw,bohw->io", x, g_up)
        np.testing.assert_allclose(grads[0][0][0, 0], expected, atol=1e-12)

    def test_full_finite_difference(self):
        spec = _micro_spec()
        net = SegNet.init(spec, np.random.default_rng(16))
        x = np.random.default_rng(17).random((2, 2, 8, 8))
        labels = np.random.default_rng(18).integers(0, 3, size=(2, 4, 4))

        def value(params):
            return softmax_cross_entropy(
                SegNet(spec=spec, params=params).forward(x)[0], labels).value

        logits, _ = net.forward(x, cache=True)
        ce = softmax_cross_entropy(logits, labels)
        grads = net.backward({"logits": ce.grads["logits"]})
        h = 1e-5
        worst = 0.0
        for i, (w, b) in enumerate(net.params):
            for arr, g in ((w, grads[i][0]), (b, grads[i][1])):
                flat, gflat = arr.reshape(-1), g.reshape(-1)
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + h
                    fp = value(net.params)
                    flat[j] = orig - h
                    fm = value(net.params)
                    flat[j] = orig
                    num = (fp - fm) / (2 * h)
                    worst = max(worst, abs(gflat[j] - num) / max(1, abs(num)))
        assert worst < 1e-4

    def test_tap_injection_adds_gradient(self):
        net = SegNet.init(_micro_spec(), np.random.default_rng(19))
        x = np.random.default_rng(20).random((1, 2, 8, 8))
        net.forward(x, cache=True)
        g_l = np.random.default_rng(21).random((1, 3, 4, 4))
        base = net.backward({"logits": g_l})
        net.forward(x, cache=True)
        g_h = np.random.default_rng(22).random((1, 4, 4, 4))
        with_head = net.backward({"logits": g_l, "head": g_h})
        # head-layer weight grads must differ once head grads are injected
        assert not np.allclose(base[1][0], with_head[1][0])
        # logits-layer grads are upstream of the injection point: unchanged
        np.testing.assert_allclose(base[2][0], with_head[2][0], atol=1e-12)
