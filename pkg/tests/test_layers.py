import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctslice import layers as L
from ctslice.gradcheck import LAYER_KINDS, check_layer, rel_error


def conv_oracle(x, w, b, stride=1):
    """Direct triple loop, no vectorization."""
    batch, c_in, length = x.shape
    c_out, _, k = w.shape
    l_out = (length - k) // stride + 1
    out = np.zeros((batch, c_out, l_out))
    for n in range(batch):
        for o in range(c_out):
            for i in range(l_out):
                acc = b[o]
                for c in range(c_in):
                    for j in range(k):
                        acc += w[o, c, j] * x[n, c, i * stride + j]
                out[n, o, i] = acc
    return out


def pool_oracle(x, window, stride):
    batch, channels, length = x.shape
    l_out = (length - window) // stride + 1
    out = np.empty((batch, channels, l_out))
    for i in range(l_out):
        out[:, :, i] = x[:, :, i * stride:i * stride + window].max(axis=2)
    return out


class TestConv:
    def test_difference_kernel(self):
        x = np.array([[[1.0, 2, 3, 4]]])
        out, _ = L.conv1d_forward(x, np.array([[[1.0, -1.0]]]), np.array([0.5]))
        np.testing.assert_array_equal(out, [[[-0.5, -0.5, -0.5]]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 10))
        out, _ = L.conv1d_forward(x, np.array([[[1.0]]]), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_first_layer_output_length(self):
        assert L.conv1d_out_len(384, 41) == 344
        layer = L.Conv1d("c", 1, 32, 41)
        assert layer.out_shape((1, 384)) == (32, 344)

    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_matches_loop_oracle(self, rng, stride):
        x = rng.normal(size=(3, 2, 17))
        w = rng.normal(size=(4, 2, 5))
        b = rng.normal(size=4)
        out, _ = L.conv1d_forward(x, w, b, stride)
        np.testing.assert_allclose(out, conv_oracle(x, w, b, stride), rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(L.ShapeError):
            L.conv1d_forward(np.zeros((1, 2, 10)), np.zeros((3, 1, 3)), np.zeros(3))
        with pytest.raises(L.ShapeError):
            L.conv1d_forward(np.zeros((1, 1, 4)), np.zeros((3, 1, 5)), np.zeros(3))
        with pytest.raises(L.ShapeError):
            L.Conv1d("c", 1, 2, 400).out_shape((1, 384))

    def test_skipped_input_gradient_keeps_param_grads(self, rng):
        x = rng.normal(size=(2, 1, 12))
        w = rng.normal(size=(3, 1, 4))
        out, cache = L.conv1d_forward(x, w, np.zeros(3))
        g = rng.normal(size=out.shape)
        full_dx, full = L.conv1d_backward(cache, g)
        dx, part = L.conv1d_backward(cache, g, need_input_grad=False)
        assert dx is None and full_dx.shape == x.shape
        np.testing.assert_array_equal(full["weight"], part["weight"])

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
    def test_linear_in_input(self, a, b, seed):
        r = np.random.default_rng(seed)
        x1, x2 = r.normal(size=(2, 2, 2, 9))
        w = r.normal(size=(3, 2, 4))
        zero = np.zeros(3)
        f = lambda x: L.conv1d_forward(x, w, zero)[0]
        np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2), atol=1e-9)


class TestBatchNorm:
    def test_two_values(self):
        x = np.array([[[1.0, 3.0]]])
        rm, rv = np.zeros(1), np.ones(1)
        out, _ = L.batchnorm_forward(x, np.ones(1), np.zeros(1), rm, rv, training=True, eps=0.0)
        np.testing.assert_allclose(out, [[[-1.0, 1.0]]])
        # running stats: 0.9 * old + 0.1 * batch (biased variance 1.0)
        np.testing.assert_allclose(rm, [0.2])
        np.testing.assert_allclose(rv, [1.0])

    def test_inference_uses_running_stats(self, rng):
        x = rng.normal(size=(4, 2, 6))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        gamma, beta = np.array([2.0, 1.0]), np.array([0.0, 3.0])
        out, _ = L.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), training=False)
        expect = gamma[:, None] * (x - rm[:, None]) / np.sqrt(rv[:, None] + 1e-5) + beta[:, None]
        np.testing.assert_allclose(out, expect)

    def test_training_output_statistics(self, rng):
        x = rng.normal(5, 3, size=(8, 3, 10))
        out, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), True)
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-5)

    def test_single_value_rejected(self):
        with pytest.raises(L.ShapeError):
            L.batchnorm_forward(np.zeros((1, 1, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)


class TestPool:
    def test_hand_example(self):
        out, _ = L.maxpool_forward(np.array([[[1.0, 3, 2, 4]]]))
        np.testing.assert_array_equal(out, [[[3.0, 4.0]]])

    def test_lengths(self):
        assert L.MaxPool1d("p").out_shape((128, 66)) == (128, 33)
        assert L.MaxPool1d("p").out_shape((32, 344)) == (32, 172)
        out, _ = L.maxpool_forward(np.zeros((1, 1, 7)))
        assert out.shape[2] == 3

    def test_tie_goes_to_first(self):
        x = np.array([[[2.0, 2.0, 5.0, 5.0]]])
        out, cache = L.maxpool_forward(x)
        dx, _ = L.maxpool_backward(cache, np.ones_like(out))
        np.testing.assert_array_equal(dx, [[[1.0, 0.0, 1.0, 0.0]]])
        # general path: windows at 1, 2 and 3 pick positions 2, 2 (first of the tie) and 3
        out, cache = L.maxpool_forward(np.array([[[2.0, 2.0, 5.0, 5.0, 1.0, 1.0]]]), window=2, stride=1)
        dx, _ = L.maxpool_backward(cache, np.ones_like(out))
        np.testing.assert_array_equal(dx, [[[1.0, 0.0, 2.0, 1.0, 1.0, 0.0]]])

    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (3, 2), (2, 3)])
    def test_matches_oracle(self, rng, window, stride):
        x = rng.normal(size=(2, 3, 11))
        out, cache = L.maxpool_forward(x, window, stride)
        np.testing.assert_array_equal(out, pool_oracle(x, window, stride))
        g = rng.normal(size=out.shape)
        dx, _ = L.maxpool_backward(cache, g)
        assert dx.sum() == pytest.approx(g.sum())

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 2, 8), elements=st.floats(-1e3, 1e3)))
    def test_output_is_window_max(self, x):
        out, _ = L.maxpool_forward(x)
        np.testing.assert_array_equal(out, pool_oracle(x, 2, 2))


class TestDenseReluDropout:
    def test_dense_hand_value(self):
        out, _ = L.dense_forward(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([1.0]))
        np.testing.assert_array_equal(out, [[12.0]])

    def test_dense_shape_error(self):
        with pytest.raises(L.ShapeError):
            L.dense_forward(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros(2))

    def test_relu(self):
        out, mask = L.relu_forward(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(out, [0.0, 0.0, 3.0])
        dx, _ = L.relu_backward(mask, np.ones(3))
        np.testing.assert_array_equal(dx, [0.0, 0.0, 1.0])

    def test_dropout_identity_at_inference(self, rng):
        x = rng.normal(size=(3, 4))
        out, mask = L.dropout_forward(x, 0.5, training=False)
        assert out is x and mask is None
        out, _ = L.dropout_forward(x, 0.0, training=True, rng=rng)
        assert out is x

    def test_dropout_preserves_mean(self, rng):
        out, mask = L.dropout_forward(np.ones(200_000), 0.5, True, rng)
        assert abs(out.mean() - 1.0) < 0.05
        assert set(np.unique(out)) <= {0.0, 2.0}
        out, _ = L.dropout_forward(np.ones(200_000), 0.2, True, rng)
        assert abs(out.mean() - 1.0) < 0.05

    def test_dropout_rate_validation(self):
        with pytest.raises(ValueError):
            L.dropout_forward(np.ones(3), 1.0, True, np.random.default_rng())


class TestGradients:
    @pytest.mark.parametrize("kind", LAYER_KINDS)
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_float64_finite_differences(self, kind, seed):
        errors = check_layer(kind, seed)
        assert max(errors.values()) < 1e-4, errors

    @pytest.mark.parametrize("layer", [
        L.Conv1d("c", 2, 3, 4, dtype=np.float32),
        L.Dense("d", 6, 4, dtype=np.float32),
    ])
    def test_float32_finite_differences(self, layer, rng):
        # both layers are linear in their parameters, so a wide step is exact up to rounding
        for p in layer.params.values():
            p[...] = rng.normal(size=p.shape)
        shape = (3, 2, 9) if isinstance(layer, L.Conv1d) else (3, 6)
        x = rng.normal(size=shape).astype(np.float32)
        out, cache = layer.forward(x)
        r = rng.normal(size=out.shape).astype(np.float32)
        _, grads = layer.backward(cache, r)
        h = np.float32(1e-2)
        for name, p in layer.params.items():
            numeric = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                up = float(np.sum(layer.forward(x)[0] * r, dtype=np.float64))
                p[i] = old - h
                down = float(np.sum(layer.forward(x)[0] * r, dtype=np.float64))
                p[i] = old
                numeric[i] = (up - down) / (2 * h)
            assert rel_error(grads[name], numeric, 1e-3).max() < 1e-2, name

    def test_rel_error_floor(self):
        assert rel_error(np.array([0.0]), np.array([1e-9]), 1e-5)[0] < 1e-3
        assert rel_error(np.array([1.0]), np.array([-1.0]))[0] == pytest.approx(2.0)
