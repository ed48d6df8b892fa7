import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfuzzy import tensor as T
from deepfuzzy.errors import ConfigurationError, DataError, NumericError, UsageError
from deepfuzzy.gradcheck import grad_check
from deepfuzzy.tensor import Tensor

from conftest import numeric_grad, rel_err


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


class TestConv2d:
    def test_constant_window_sum(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, 4.0)

    def test_patch_dot_product(self):
        x = Tensor(np.array([1.0, 0.0, 0.5, 0.0]).reshape(1, 1, 2, 2))
        w = Tensor(np.array([0.4, 0.9, 0.2, 0.1]).reshape(1, 1, 2, 2))
        assert T.conv2d(x, w).data.item() == pytest.approx(0.5, abs=1e-15)

    def test_stride_two_gives_four_subregions(self, rng):
        out = T.conv2d(Tensor(rng.random((1, 1, 4, 4))), Tensor(rng.random((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 2, 2)

    def test_matches_direct_loops(self, rng):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1, bias=Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for k in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        want = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * w[k]) + b[k]
                        assert out[n, k, i, j] == pytest.approx(want, abs=1e-12)

    def test_output_dims_exhaustive(self):
        for H in range(1, 9):
            for W in range(1, 9):
                for kh in range(1, H + 1):
                    for kw in range(1, min(H, W) + 1):
                        out = T.conv2d(Tensor(np.zeros((1, 1, H, W))), Tensor(np.zeros((1, 1, kh, kw))))
                        assert out.shape[2:] == (H - kh + 1, W - kw + 1)

    def test_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, Tensor(np.zeros((1, 3, 2, 2))))
        with pytest.raises(ConfigurationError):
            T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), stride=0)
        with pytest.raises(ConfigurationError):
            T.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (2, 1), (1, (0, 1, 1, 0))])
    def test_gradients(self, rng, stride, padding):
        x, w, b = leaf(rng.normal(size=(2, 2, 5, 5))), leaf(rng.normal(size=(3, 2, 2, 2))), leaf(rng.normal(size=3))
        r = rng.normal(size=T.conv2d(x, w, stride, padding, b).shape)

        def f():
            return float(np.sum(T.conv2d(x, w, stride, padding, b).data * r))

        T.tsum(T.mul(T.conv2d(x, w, stride, padding, b), Tensor(r))).backward()
        for t in (x, w, b):
            assert rel_err(t.grad, numeric_grad(f, t.data)) < 1e-6


class TestClamp01:
    def test_values(self):
        x = leaf([1.7, -0.3, 0.42])
        y = T.clamp01(x)
        np.testing.assert_array_equal(y.data, [1.0, 0.0, 0.42])
        T.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_boundaries_have_zero_gradient(self):
        x = leaf([0.0, 1.0])
        T.tsum(T.clamp01(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])


class TestNormalizeRules:
    def test_ratio(self):
        m = Tensor(np.array([0.2, 0.6]).reshape(1, 2, 1, 1))
        np.testing.assert_allclose(T.normalize_rules(m, 1e-8).data.ravel(), [0.25, 0.75], atol=1e-7)

    def test_all_zero_cell(self):
        out = T.normalize_rules(Tensor(np.zeros((1, 3, 1, 1))), 1e-8)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_rule(self):
        out = T.normalize_rules(Tensor(np.full((1, 1, 1, 1), 0.5)), 1e-8)
        assert out.data.item() == pytest.approx(0.5 / (0.5 + 1e-8), abs=1e-15)

    def test_gradient(self, rng):
        m = leaf(rng.uniform(0.05, 1, size=(2, 3, 2, 2)))
        r = rng.normal(size=m.shape)
        T.tsum(T.mul(T.normalize_rules(m), Tensor(r))).backward()
        num = numeric_grad(lambda: float(np.sum(T.normalize_rules(Tensor(m.data)).data * r)), m.data)
        assert rel_err(m.grad, num) < 1e-6

    @given(st.integers(0, 2**32 - 1), st.integers(1, 5))
    @settings(max_examples=100, deadline=None)
    def test_cell_sum(self, seed, K):
        m = np.random.default_rng(seed).uniform(0, 1, size=(2, K, 3, 3))
        m[0, :, 0, 0] = 0.0
        out = T.normalize_rules(Tensor(m), 1e-8).data
        assert out.min() >= 0 and out.max() <= 1
        S = m.sum(axis=1)
        np.testing.assert_allclose(out.sum(axis=1), S / (S + 1e-8), atol=1e-9, rtol=0)


class TestPadPool:
    def test_pad_border(self):
        out = T.pad2d(Tensor(np.ones((1, 1, 3, 3))), 1).data
        assert out.shape == (1, 1, 5, 5)
        assert out[0, 0, 1:4, 1:4].min() == 1.0
        assert out.sum() == 9.0

    def test_pad_zero_is_identity(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        assert T.pad2d(x, 0) is x

    def test_pad_single_value(self):
        out = T.pad2d(Tensor(np.full((1, 1, 1, 1), 3.5)), 2).data
        expected = np.zeros((1, 1, 5, 5))
        expected[0, 0, 2, 2] = 3.5
        np.testing.assert_array_equal(out, expected)

    def test_pad_backward_crops(self, rng):
        x = leaf(rng.normal(size=(1, 2, 3, 3)))
        T.tsum(T.pad2d(x, (1, 0, 2, 1))).backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_pool_mean(self):
        out = T.avg_pool2d(Tensor(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)), 2)
        assert out.data.item() == 2.5

    @given(st.floats(-100, 100), st.integers(1, 4), st.integers(1, 3))
    @settings(max_examples=50, deadline=None)
    def test_pool_constant_exact(self, c, window, stride):
        out = T.avg_pool2d(Tensor(np.full((1, 2, 6, 6), c)), window, stride).data
        assert np.all(out == c)

    def test_pool_geometry(self):
        assert T.avg_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2, 1).shape == (1, 1, 4, 4)

    def test_pool_window_too_large(self):
        with pytest.raises(ConfigurationError):
            T.avg_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)

    def test_pool_gradient(self, rng):
        x = leaf(rng.normal(size=(2, 1, 5, 4)))
        r = rng.normal(size=T.avg_pool2d(x, 2, 1).shape)
        T.tsum(T.mul(T.avg_pool2d(x, 2, 1), Tensor(r))).backward()
        num = numeric_grad(lambda: float(np.sum(T.avg_pool2d(Tensor(x.data), 2, 1).data * r)), x.data)
        assert rel_err(x.grad, num) < 1e-6


class TestElementwise:
    def test_mul_add(self):
        np.testing.assert_array_equal(T.eltwise(Tensor([2.0, 3]), Tensor([4.0, 5]), "mul").data, [8, 15])
        np.testing.assert_array_equal(T.eltwise(Tensor([1.0, -1]), Tensor([-1.0, 1]), "add").data, [0, 0])
        x = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(T.mul(x, Tensor(np.ones(2))).data, x.data)

    def test_mul_backward(self):
        a, b = leaf([2.0, 3.0]), leaf([4.0, 5.0])
        T.tsum(T.mul(a, b)).backward()
        np.testing.assert_array_equal(a.grad, [4, 5])
        np.testing.assert_array_equal(b.grad, [2, 3])

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.mul(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_leaky_relu(self):
        x = leaf([2.0, -2.0, 0.0])
        y = T.leaky_relu(x, 0.01)
        np.testing.assert_allclose(y.data, [2.0, -0.02, 0.0])
        T.tsum(y).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 0.01, 1.0])


class TestDense:
    def test_identity(self):
        x = Tensor([[1.0, 2.0]])
        out = T.dense(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_affine(self):
        out = T.dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[4.0, 5.0]])

    def test_zero_input_gives_bias(self):
        out = T.dense(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 2))), Tensor([0.5, -1.0]))
        np.testing.assert_array_equal(out.data, [[0.5, -1.0]] * 2)

    def test_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))

    def test_gradcheck(self, rng):
        x, w, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=2))
        r = Tensor(rng.normal(size=(3, 2)))
        report = grad_check(lambda: T.tsum(T.mul(T.dense(x, w, b), r)), {"x": x, "w": w, "b": b},
                            samples=None)
        assert report.max_error < 1e-6


class TestSoftmaxCrossEntropy:
    def test_uniform(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_saturated(self):
        assert T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0]).item() == pytest.approx(0, abs=1e-12)

    def test_gradient_against_finite_differences(self):
        logits = leaf(np.zeros((2, 2)))
        T.softmax_cross_entropy(logits, [1, 1]).backward()
        num = numeric_grad(lambda: T.softmax_cross_entropy(Tensor(logits.data), [1, 1]).item(), logits.data)
        np.testing.assert_allclose(num, [[0.25, -0.25], [0.25, -0.25]], atol=1e-9)
        np.testing.assert_allclose(logits.grad, num, atol=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


class TestDropout:
    def test_identity_cases(self, rng):
        x = Tensor(rng.normal(size=10))
        assert T.dropout(x, 0.0, True, rng) is x
        assert T.dropout(x, 0.2, False, rng) is x

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            T.dropout(Tensor(np.ones(3)), 1.0, True, rng)

    def test_expectation(self):
        x = Tensor(np.full(100_000, 2.0))
        out = T.dropout(x, 0.2, True, np.random.default_rng(3)).data
        assert abs(out.mean() - 2.0) / 2.0 < 0.01
        assert set(np.unique(out)) <= {0.0, 2.5}


class TestBackward:
    def test_sum(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self, rng):
        x = leaf(rng.normal(size=5))
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)

    def test_non_scalar_root(self):
        with pytest.raises(UsageError):
            T.backward(T.mul(leaf([1.0, 2.0]), Tensor([1.0, 1.0])))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_fan_out_accumulates(self, seed):
        """x feeding two consumers gets the sum of the single-consumer gradients."""
        r = np.random.default_rng(seed)
        xv, a, b = r.normal(size=(3, 4)), r.normal(size=4), r.normal(size=4)

        def consumer1(x):
            return T.tsum(T.mul(T.leaky_relu(x, 0.1), Tensor(np.tile(a, (3, 1)))))

        def consumer2(x):
            return T.tsum(T.mul(T.mul(x, x), Tensor(np.tile(b, (3, 1)))))

        grads = []
        for f in (consumer1, consumer2):
            x = leaf(xv.copy())
            f(x).backward()
            grads.append(x.grad)
        x = leaf(xv.copy())
        T.add(consumer1(x), consumer2(x)).backward()
        np.testing.assert_allclose(x.grad, grads[0] + grads[1], rtol=1e-12, atol=1e-12)

    def test_grads_accumulate_across_calls(self):
        x = leaf([1.0, 2.0])
        T.tsum(x).backward()
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_graph_order(self):
        x = leaf([1.0])
        y = T.mul(x, x)
        z = T.add(y, x)
        g = T.Graph(T.tsum(z))
        ops = [n.op for n in g.nodes]
        assert ops.index("mul") < ops.index("add") < ops.index("sum")
        assert g.leaves == [x]

    def test_no_grad(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad

    def test_debug_mode_catches_nan(self):
        with np.errstate(invalid="ignore"):
            with T.debug_mode():
                with pytest.raises(NumericError):
                    T.mul(Tensor([np.inf]), Tensor([0.0]))
            assert np.isnan(T.mul(Tensor([np.inf]), Tensor([0.0])).data[0])


def test_take_permutation_gradient(rng):
    x = leaf(rng.normal(size=(4, 3)))
    r = rng.normal(size=(4, 3))
    T.tsum(T.mul(T.take(x, [2, 0, 3, 1]), Tensor(r))).backward()
    expected = np.zeros((4, 3))
    expected[[2, 0, 3, 1]] = r
    np.testing.assert_array_equal(x.grad, expected)


def test_clamp_gradcheck_interior(rng):
    x = leaf(rng.uniform(0.1, 0.9, size=20))
    r = Tensor(rng.normal(size=20))
    assert grad_check(lambda: T.tsum(T.mul(T.clamp01(x), r)), {"x": x}, samples=None).max_error < 1e-6


def test_conv_stride2_gradcheck(rng):
    x, w = leaf(rng.normal(size=(2, 2, 6, 6))), leaf(rng.normal(size=(3, 2, 2, 2)))
    r = Tensor(rng.normal(size=(2, 3, 3, 3)))
    report = grad_check(lambda: T.tsum(T.mul(T.conv2d(x, w, stride=2), r)), {"x": x, "w": w})
    assert report.max_error < 1e-6
