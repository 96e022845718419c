import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threeet import tensor as T
from threeet.errors import NumericalError, ShapeError
from threeet.training import numeric_gradient, relative_error

from oracles import conv2d_naive


def sparse_randn(rng, shape, zero_frac=0.5):
    x = rng.standard_normal(shape)
    x[rng.random(shape) < zero_frac] = 0.0
    return x


class TestConv2d:
    def test_single_mac(self):
        out = T.conv2d_forward(np.array([[[2.0]]]), np.array([[[[3.0]]]]), np.array([1.0]), padding=0)
        assert out.tolist() == [[[7.0]]]

    def test_all_zero_input_gives_bias_and_no_effective_macs(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((5, 8, 3, 3))
        b = rng.standard_normal(5)
        c = T.OpsCounter()
        out = T.conv2d_forward(np.zeros((8, 10, 10)), w, b, counter=c, key="l")
        np.testing.assert_array_equal(out, np.broadcast_to(b[:, None, None], (5, 10, 10)))
        assert c.effective_macs == 0
        assert c.dense_macs == 5 * 8 * 9 * 100

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = sparse_randn(rng, (4, 6, 6))
        w = rng.standard_normal((8, 4, 3, 3))
        b = rng.standard_normal(8)
        np.testing.assert_allclose(T.conv2d_forward(x, w, b), conv2d_naive(x, w, b, 1), rtol=0, atol=1e-12)

    def test_zero_skipping_is_bit_identical_to_dense_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = sparse_randn(rng, (3, 2, 7, 9), 0.7)
            w = rng.standard_normal((4, 2, 3, 3))
            b = rng.standard_normal(4)
            a = T.conv2d_forward(x, w, b, skip_zeros=True)
            d = T.conv2d_forward(x, w, b, skip_zeros=False)
            assert np.array_equal(a, d)

    @pytest.mark.parametrize("method", ["loop", "gemm"])
    @pytest.mark.parametrize("zero_frac", [0.1, 0.9])
    def test_both_paths_match_naive_loop(self, method, zero_frac):
        rng = np.random.default_rng(11)
        x = sparse_randn(rng, (2, 3, 5, 7), zero_frac)
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        c = T.OpsCounter()
        out = T.conv2d_forward(x, w, b, counter=c, key="k", method=method)
        for i in range(2):
            np.testing.assert_allclose(out[i], conv2d_naive(x[i], w, b, 1), rtol=0, atol=1e-12)
        assert c.effective_macs == c.dense_macs * np.count_nonzero(x) // x.size

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            T.conv2d_forward(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), method="fft")

    def test_counter_dense_and_effective(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((6, 3, 3, 3))
        c = T.OpsCounter()
        T.conv2d_forward(rng.uniform(1, 2, (3, 5, 4)), w, counter=c, key="k")
        assert c.effective_macs == c.dense_macs == 6 * 3 * 9 * 20
        x = sparse_randn(rng, (3, 5, 4))
        c = T.OpsCounter()
        T.conv2d_forward(x, w, counter=c, key="k")
        assert c.effective_macs == c.dense_macs * np.count_nonzero(x) // x.size
        assert c.per_layer["k"] == [c.dense_macs, c.effective_macs]

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), c=st.integers(1, 3))
    def test_padding_one_preserves_spatial_size(self, h, w, c):
        x = np.ones((c, h, w))
        out = T.conv2d_forward(x, np.ones((2, c, 3, 3)))
        assert out.shape == (2, h, w)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d_forward(np.zeros((3, 4, 4)), np.zeros((2, 2, 3, 3)))

    def test_nan_is_a_hard_error(self):
        with pytest.raises(NumericalError):
            T.conv2d_forward(np.full((1, 3, 3), np.nan), np.ones((1, 1, 3, 3)), skip_zeros=False)


class TestConv2dBackward:
    def test_scalar_case(self):
        gi, gw, gb = T.conv2d_backward(
            np.array([[[2.0]]]), np.array([[[[3.0]]]]), np.array([[[1.0]]]), padding=0
        )
        assert gi.tolist() == [[[3.0]]]
        assert gw.tolist() == [[[[2.0]]]]
        assert gb.tolist() == [1.0]

    def test_zero_grad_out(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        gi, gw, gb = T.conv2d_backward(x, w, np.zeros((3, 5, 5)))
        assert not gi.any() and not gw.any() and not gb.any()

    @pytest.mark.parametrize("seed", range(4))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cin, cout, h, w = rng.integers(1, 4, 2).tolist() + rng.integers(2, 6, 2).tolist()
        x = sparse_randn(rng, (2, cin, h, w), 0.3)
        wt = rng.standard_normal((cout, cin, 3, 3))
        b = rng.standard_normal(cout)
        proj = rng.standard_normal((2, cout, h, w))

        def f():
            return float(np.sum(proj * T.conv2d_forward(x, wt, b)))

        gi, gw, gb = T.conv2d_backward(x, wt, proj)
        for analytic, arr in ((gi, x), (gw, wt), (gb, b)):
            num = numeric_gradient(f, arr)
            assert relative_error(analytic, num).max() < 1e-4


    @pytest.mark.parametrize("zero_frac", [0.1, 0.9])
    def test_weight_gradient_paths_agree(self, zero_frac):
        rng = np.random.default_rng(12)
        x = sparse_randn(rng, (3, 4, 6, 5), zero_frac)
        w = rng.standard_normal((2, 4, 3, 3))
        g = rng.standard_normal((3, 2, 6, 5))
        _, a, _ = T.conv2d_backward(x, w, g, method="loop")
        _, b, _ = T.conv2d_backward(x, w, g, method="gemm")
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestMaxPool:
    def test_basic(self):
        out, _ = T.maxpool2x2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert out.tolist() == [[[4.0]]]

    def test_floor_semantics(self):
        out, _ = T.maxpool2x2_forward(np.arange(25.0).reshape(1, 5, 5))
        assert out.shape == (1, 2, 2)
        assert out[0].tolist() == [[6.0, 8.0], [16.0, 18.0]]

    def test_four_stages_reduce_80x60_to_5x3(self):
        x = np.random.default_rng(0).standard_normal((8, 60, 80))
        out, _ = T.maxpool2x2_forward(x)
        assert out.shape == (8, 30, 40)
        for _ in range(3):
            out, _ = T.maxpool2x2_forward(out)
        assert out.shape == (8, 3, 5)

    def test_backward_routes_to_argmax(self):
        _, cache = T.maxpool2x2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert T.maxpool2x2_backward(cache, np.array([[[1.0]]])).tolist() == [[[0, 0], [0, 1.0]]]

    def test_tie_goes_to_first_element(self):
        _, cache = T.maxpool2x2_forward(np.full((1, 2, 2), 5.0))
        assert T.maxpool2x2_backward(cache, np.array([[[1.0]]])).tolist() == [[[1.0, 0], [0, 0]]]

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.permutation(2 * 5 * 7).astype(float).reshape(2, 5, 7)  # no ties
        proj = rng.standard_normal((2, 2, 3))

        def f():
            return float(np.sum(proj * T.maxpool2x2_forward(x)[0]))

        _, cache = T.maxpool2x2_forward(x)
        num = numeric_gradient(f, x)
        assert relative_error(T.maxpool2x2_backward(cache, proj), num).max() < 1e-4

    def test_degenerate(self):
        with pytest.raises(ShapeError):
            T.maxpool2x2_forward(np.zeros((1, 1, 4)))


class TestBatchNorm:
    def test_zero_variance_channel(self):
        x = np.ones((4, 2, 3, 3))
        x[:, 1] = np.random.default_rng(0).standard_normal((4, 3, 3))
        out, _ = T.batchnorm_forward(x, np.ones(2), np.zeros(2), T.BatchNormStats())
        assert not out[:, 0].any()

    def test_single_element_batch_gives_beta(self):
        beta = np.array([0.3, -1.2])
        out, _ = T.batchnorm_forward(np.array([[[[5.0]], [[-2.0]]]]), np.ones(2), beta, T.BatchNormStats())
        np.testing.assert_allclose(out.ravel(), beta)

    def test_output_statistics(self):
        rng = np.random.default_rng(1)
        x = rng.normal(3.0, 2.5, (8, 3, 5, 5))
        gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([0.1, -0.4, 2.0])
        out, _ = T.batchnorm_forward(x, gamma, beta, T.BatchNormStats(eps=0.0))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, atol=1e-6)

    def test_running_stats_update_and_eval(self):
        rng = np.random.default_rng(2)
        x = rng.normal(1.0, 1.0, (4, 2, 3, 3))
        stats = T.BatchNormStats.fresh(2, np.float64)
        T.batchnorm_forward(x, np.ones(2), np.zeros(2), stats, "train")
        np.testing.assert_allclose(stats.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        out, _ = T.batchnorm_forward(x, np.ones(2), np.zeros(2), stats, "eval")
        expected = (x - stats.running_mean[None, :, None, None]) / np.sqrt(stats.running_var + 1e-5)[None, :, None, None]
        np.testing.assert_allclose(out, expected)

    def test_eval_without_stats(self):
        with pytest.raises(ValueError):
            T.batchnorm_forward(np.zeros((1, 2, 2, 2)), np.ones(2), np.zeros(2), T.BatchNormStats(), "eval")

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_finite_differences(self, mode):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 2, 3, 4))
        gamma, beta = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
        proj = rng.standard_normal(x.shape)
        stats = T.BatchNormStats(rng.standard_normal(2), rng.uniform(0.5, 2, 2))

        def f():
            s = T.BatchNormStats(stats.running_mean.copy(), stats.running_var.copy())
            return float(np.sum(proj * T.batchnorm_forward(x, gamma, beta, s, mode)[0]))

        s = T.BatchNormStats(stats.running_mean.copy(), stats.running_var.copy())
        _, cache = T.batchnorm_forward(x, gamma, beta, s, mode)
        gx, gg, gb = T.batchnorm_backward(cache, proj)
        for analytic, arr in ((gx, x), (gg, gamma), (gb, beta)):
            assert relative_error(analytic, numeric_gradient(f, arr)).max() < 1e-4


class TestActivations:
    def test_values(self):
        assert T.sigmoid(0.0) == 0.5
        assert T.tanh(0.0) == 0.0
        assert T.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]

    def test_relu_backward_at_zero(self):
        assert T.relu_backward(np.array([0.0]), np.array([1.0])).tolist() == [0.0]

    @pytest.mark.parametrize(
        "fwd,bwd,uses_output",
        [(T.sigmoid, T.sigmoid_backward, True), (T.tanh, T.tanh_backward, True), (T.relu, T.relu_backward, False)],
    )
    def test_finite_differences(self, fwd, bwd, uses_output):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        x = x[np.abs(x) > 1e-3]
        proj = rng.standard_normal(x.shape)
        num = numeric_gradient(lambda: float(np.sum(proj * fwd(x))), x)
        analytic = bwd(fwd(x) if uses_output else x, proj)
        assert relative_error(analytic, num).max() < 1e-6


class TestFullyConnected:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(T.fc_forward(x, np.eye(3), np.zeros(3)), x)

    def test_counts(self):
        c = T.OpsCounter()
        x = np.ones(960)
        x[:100] = 0
        T.fc_forward(x, np.ones((128, 960)), np.zeros(128), c, "fc1")
        assert c.dense_macs == 122880
        assert c.effective_macs == 860 * 128

    def test_skipped_and_dense_agree(self):
        rng = np.random.default_rng(1)
        x = sparse_randn(rng, (3, 20))
        w, b = rng.standard_normal((7, 20)), rng.standard_normal(7)
        np.testing.assert_allclose(T.fc_forward(x, w, b, T.OpsCounter(), "k"), x @ w.T + b, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((2, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
        proj = rng.standard_normal((2, 3))
        gi, gw, gb = T.fc_backward(x, w, proj)

        def f():
            return float(np.sum(proj * T.fc_forward(x, w, b)))

        for analytic, arr in ((gi, x), (gw, w), (gb, b)):
            assert relative_error(analytic, numeric_gradient(f, arr)).max() < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.fc_forward(np.ones(4), np.ones((2, 5)), np.zeros(2))


class TestOpsCounter:
    def test_effective_never_exceeds_dense(self):
        with pytest.raises(AssertionError):
            T.OpsCounter().add("k", 5, 6)

    def test_merge(self):
        a, b = T.OpsCounter(), T.OpsCounter()
        a.add(("l1", "input"), 10, 4)
        b.add(("l1", "input"), 10, 6)
        b.add(("l1", "hidden"), 3, 0)
        a.merge(b)
        assert (a.dense_macs, a.effective_macs) == (23, 10)
        assert a.per_layer[("l1", "input")] == [20, 10]
