import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from snnsc.layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    ReLU,
    Sequential,
    Sigmoid,
    no_grad,
    sigmoid,
)


def conv64(cin, cout, seed=0, **kw):
    return Conv2d(cin, cout, rng=np.random.default_rng(seed), dtype=np.float64, **kw)


def naive_conv(x, w, b, pad):
    """Direct loop cross-correlation, stride 1."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


class TestConv:
    def test_identity_kernel(self):
        conv = conv64(3, 3)
        conv.weight.data[...] = 0
        for c in range(3):
            conv.weight.data[c, c, 1, 1] = 1.0
        x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
        np.testing.assert_array_equal(conv(x), x)

    def test_zero_weights(self):
        conv = conv64(2, 4)
        conv.weight.data[...] = 0
        out = conv(np.random.default_rng(0).normal(size=(1, 2, 4, 4)))
        assert out.shape == (1, 4, 4, 4) and not out.any()

    def test_matches_naive_loop(self):
        conv = conv64(3, 5, seed=2)
        conv.bias.data[:] = np.arange(5)
        x = np.random.default_rng(3).normal(size=(2, 3, 6, 7))
        np.testing.assert_allclose(conv(x), naive_conv(x, conv.weight.data, conv.bias.data, 1), atol=1e-12)

    def test_stride_and_no_padding(self):
        conv = conv64(2, 3, stride=2, padding=0)
        x = np.random.default_rng(4).normal(size=(1, 2, 7, 7))
        full = naive_conv(x, conv.weight.data, conv.bias.data, 0)
        np.testing.assert_allclose(conv(x), full[:, :, ::2, ::2], atol=1e-12)

    def test_weight_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        conv = conv64(1, 1, seed=6)
        x = rng.normal(size=(1, 1, 4, 4))
        g = rng.normal(size=(1, 1, 4, 4))
        conv.zero_grad()
        conv(x)
        conv.backward(g)
        with no_grad():
            numeric = central_difference(lambda: float(np.sum(conv(x) * g)), conv.weight.data)
        rel = np.abs(conv.weight.grad - numeric).max() / np.abs(numeric).max()
        assert rel < 1e-6

    def test_input_and_bias_gradients(self):
        rng = np.random.default_rng(7)
        conv = conv64(2, 3, seed=8, stride=2)
        x = rng.normal(size=(2, 2, 5, 5))
        g = rng.normal(size=conv(x).shape)
        conv.clear_cache()
        conv.zero_grad()
        conv(x)
        dx = conv.backward(g)
        with no_grad():
            f = lambda: float(np.sum(conv(x) * g))  # noqa: E731
            np.testing.assert_allclose(dx, central_difference(f, x), rtol=1e-6, atol=1e-8)
            np.testing.assert_allclose(conv.bias.grad, central_difference(f, conv.bias.data), rtol=1e-6)

    def test_geometry_mismatch(self):
        with pytest.raises(ValueError):
            conv64(3, 2)(np.zeros((1, 4, 5, 5)))
        with pytest.raises(ValueError):
            conv64(1, 1, padding=0)(np.zeros((1, 1, 2, 2)))

    def test_frozen_weights_get_no_gradient(self):
        conv = conv64(1, 2)
        conv.requires_grad_(False)
        conv(np.ones((1, 1, 3, 3)))
        conv.backward(np.ones((1, 2, 3, 3)))
        assert not conv.weight.grad.any()

    def test_lifo_cache_supports_repeated_calls(self):
        rng = np.random.default_rng(9)
        conv = conv64(2, 2)
        xs = [rng.normal(size=(1, 2, 3, 3)) for _ in range(3)]
        gs = [rng.normal(size=(1, 2, 3, 3)) for _ in range(3)]
        for x in xs:
            conv(x)
        dxs = [conv.backward(g) for g in reversed(gs)][::-1]
        for x, g, dx in zip(xs, gs, dxs):
            conv(x)
            np.testing.assert_allclose(conv.backward(g), dx)


class TestBatchNorm:
    def bn(self, c=3):
        return BatchNorm2d(c, dtype=np.float64)

    def test_fixed_point(self):
        x = np.random.default_rng(0).normal(size=(8, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        # eps scales the output by 1/sqrt(1 + eps), a relative change of ~5e-6
        np.testing.assert_allclose(self.bn()(x), x, rtol=1e-5)

    def test_zero_gamma_gives_beta(self):
        bn = self.bn()
        bn.gamma.data[:] = 0
        bn.beta.data[:] = [0.5, -1.0, 2.0]
        out = bn(np.random.default_rng(1).normal(size=(4, 3, 2, 2)))
        np.testing.assert_allclose(out, np.broadcast_to(bn.beta.data[None, :, None, None], out.shape))

    def test_train_statistics(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(16, 3, 4, 4))
        out = self.bn()(x)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_stats_and_eval(self):
        bn = self.bn(1)
        x = np.random.default_rng(3).normal(2.0, 3.0, size=(10, 1, 4, 4))
        bn(x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(), rtol=1e-12)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(ddof=1), rtol=1e-12)
        bn.eval()
        y = bn(np.full((1, 1, 1, 1), 5.0))
        expected = (5.0 - bn.running_mean[0]) / np.sqrt(bn.running_var[0] + 1e-5)
        assert y[0, 0, 0, 0] == pytest.approx(expected)
        assert np.all(bn.running_var >= 0)

    def test_single_sample_train_rejected(self):
        with pytest.raises(ValueError):
            self.bn(1)(np.zeros((1, 1, 2, 2)))

    def test_single_sample_eval_ok(self):
        bn = self.bn(1).eval()
        assert bn(np.zeros((1, 1, 2, 2))).shape == (1, 1, 2, 2)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_match_fd(self, mode):
        rng = np.random.default_rng(4)
        bn = self.bn(2)
        bn.gamma.data[:] = [1.5, -0.7]
        bn.beta.data[:] = [0.1, 0.2]
        bn.running_mean[:] = [0.3, -0.2]
        bn.running_var[:] = [2.0, 0.5]
        bn.train(mode == "train")
        x = rng.normal(size=(3, 2, 2, 2))
        g = rng.normal(size=x.shape)
        bn(x)
        dx = bn.backward(g)
        mean, var = bn.running_mean.copy(), bn.running_var.copy()

        def f():
            bn.running_mean[:], bn.running_var[:] = mean, var
            with no_grad():
                return float(np.sum(bn(x) * g))

        np.testing.assert_allclose(dx, central_difference(f, x), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(bn.gamma.grad, central_difference(f, bn.gamma.data), rtol=1e-5)


class TestSmallLayers:
    def test_sigmoid_is_stable_and_bounded(self):
        x = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
        y = sigmoid(x)
        assert np.all(np.isfinite(y)) and y[2] == 0.5
        assert np.all((y >= 0) & (y <= 1))

    def test_linear_gradient(self):
        rng = np.random.default_rng(0)
        lin = Linear(4, 3, rng=rng, dtype=np.float64)
        x, g = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        lin(x)
        dx = lin.backward(g)
        with no_grad():
            f = lambda: float(np.sum(lin(x) * g))  # noqa: E731
            np.testing.assert_allclose(dx, central_difference(f, x), rtol=1e-6)
            np.testing.assert_allclose(lin.weight.grad, central_difference(f, lin.weight.data), rtol=1e-6)

    def test_sequential_pooling_chain_gradient(self):
        rng = np.random.default_rng(1)
        net = Sequential(conv64(2, 3), ReLU(), AvgPool2d(2), Sigmoid(), GlobalAvgPool())
        x = rng.normal(size=(2, 2, 4, 4))
        g = rng.normal(size=(2, 3))
        net(x)
        dx = net.backward(g)
        with no_grad():
            numeric = central_difference(lambda: float(np.sum(net(x) * g)), x)
        np.testing.assert_allclose(dx, numeric, rtol=1e-5, atol=1e-8)

    def test_no_grad_skips_caches(self):
        conv = conv64(1, 1)
        with no_grad():
            conv(np.zeros((1, 1, 3, 3)))
        assert conv._cache == []

    def test_named_parameters_and_buffers(self):
        net = Sequential(conv64(1, 2), BatchNorm2d(2))
        names = [n for n, _ in net.named_parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.gamma", "layers.1.beta"]
        assert [n for n, _ in net.named_buffers()] == ["layers.1.running_mean", "layers.1.running_var"]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 2))
def test_conv_shape_and_naive_parity(cin, cout, size, pad):
    conv = conv64(cin, cout, padding=pad)
    x = np.random.default_rng(size).normal(size=(2, cin, size, size))
    with no_grad():
        np.testing.assert_allclose(conv(x), naive_conv(x, conv.weight.data, conv.bias.data, pad), atol=1e-12)
