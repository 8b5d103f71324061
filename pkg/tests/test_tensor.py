import numpy as np
import pytest

from udtransnet import tensor as T
from udtransnet.tensor import (
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    grad_check,
)


def rand(shape, seed, lo=-2.0, hi=2.0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape).astype(dtype))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor.eye(2), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[0.0, 1.0], [0.0, 0.0]])

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(rand((2, 3), 0), rand((2, 3), 1))

    def test_gradient_vs_finite_differences(self):
        b = rand((4, 3), 7)

        def f(a):
            return T.matmul(a, b).sum()

        assert grad_check(f, [rand((5, 4), 3)]) < 1e-4

    def test_batched_matches_per_sample(self):
        w = rand((3, 3), 11)
        xs = [rand((3, 5), s) for s in (1, 2)]
        batched = T.matmul(w, Tensor(np.stack([x.data for x in xs])))
        for i, x in enumerate(xs):
            np.testing.assert_allclose(batched.data[i], T.matmul(w, x).data, rtol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_values_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        x = rand((4, 4), 5, lo=-3, hi=3)
        out = T.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), axis=3)


class TestInstanceNorm:
    def test_constant_row_to_zeros(self):
        out = T.instance_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_already_normalized(self):
        out = T.instance_norm(Tensor([[1.0, -1.0]]))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_rows_standardized(self):
        x = rand((3, 7), 2)
        out = T.instance_norm(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-4)

    def test_gradient(self):
        def f(x):
            return (T.instance_norm(x) * rand((3, 5), 9)).sum()

        assert grad_check(f, [rand((3, 5), 4)]) < 1e-3


class TestLayerNorm:
    def test_constant_token_to_zeros(self):
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = T.layer_norm(Tensor(np.full((3, 2), 4.0)), gamma, beta, axis=-2)
        np.testing.assert_allclose(out.data, np.zeros((3, 2)), atol=1e-12)

    def test_normalized_input_unchanged(self):
        x = np.array([[1.0], [-1.0]])
        out = T.layer_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), axis=-2)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_gradient(self):
        w = rand((4, 6), 13)

        def f(x, g, b):
            return (T.layer_norm(x, g, b, axis=-2) * w).sum()

        err = grad_check(f, [rand((4, 6), 3), rand((4,), 5, lo=0.5, hi=1.5), rand((4,), 6)])
        assert err < 1e-3


class TestConv2d:
    def test_ones_kernel_doubles(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = T.conv2d(x, w)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_averaging_kernel_matches_window_means(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (1, 4, 4))
        w = np.full((1, 1, 3, 3), 1.0 / 9.0)
        out = T.conv2d(Tensor(x), Tensor(w)).data
        # direct window-sum oracle
        for i in range(2):
            for j in range(2):
                assert abs(out[0, i, j] - x[0, i:i + 3, j:j + 3].mean()) < 1e-6

    def test_non_integer_output_is_error(self):
        with pytest.raises(ShapeError):
            T.conv2d(rand((1, 5, 5), 0), rand((2, 1, 2, 2), 1), stride=2)

    def test_gradients(self):
        x0 = rand((2, 5, 5), 1)
        w0 = rand((3, 2, 3, 3), 2)
        b0 = rand((3,), 3)

        def f(x, w, b):
            return T.conv2d(x, w, b, stride=1, pad=1).sum()

        assert grad_check(f, [x0, w0, b0]) < 1e-3

    def test_strided_gradient(self):
        def f(x, w):
            return (T.conv2d(x, w, stride=2, pad=1) * rand((2, 3, 3), 8)).sum()

        assert grad_check(f, [rand((1, 5, 5), 4), rand((2, 1, 3, 3), 5)]) < 1e-3

    def test_batched_matches_per_sample(self):
        w = rand((2, 3, 3, 3), 6)
        xs = np.stack([rand((3, 6, 6), s).data for s in (10, 11)])
        batched = T.conv2d(Tensor(xs), w, pad=1).data
        for i in range(2):
            single = T.conv2d(Tensor(xs[i]), w, pad=1).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-12)


class TestResample:
    def test_max_pool(self):
        out = T.resample(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, "max_pool")
        np.testing.assert_array_equal(out.data, [[[4.0]]])

    def test_max_pool_indivisible(self):
        with pytest.raises(ShapeError):
            T.resample(rand((1, 3, 3), 0), 2, "max_pool")

    def test_nearest_up(self):
        out = T.resample(Tensor([[[1.0]]]), 2, "nearest_up")
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))

    def test_bilinear_ramp(self):
        # closed-form oracle: align_corners=False on a ramp keeps interior
        # samples on the line and clamps the half-pixel border
        ramp = np.arange(4, dtype=np.float64).reshape(1, 1, 4)
        out = T.resample(Tensor(np.repeat(ramp, 4, axis=1)), 2, "bilinear_up").data
        expected = np.array([0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])
        np.testing.assert_allclose(out[0, 4], expected, atol=1e-12)

    def test_pool_and_up_gradients(self):
        def fp(x):
            return (T.max_pool(x, 2) * rand((1, 2, 2), 3)).sum()

        def fn(x):
            return (T.upsample_nearest(x, 2) * rand((1, 4, 4), 4)).sum()

        def fb(x):
            return (T.upsample_bilinear(x, 2) * rand((1, 4, 4), 5)).sum()

        assert grad_check(fp, [rand((1, 4, 4), 6)]) < 1e-3
        assert grad_check(fn, [rand((1, 2, 2), 7)]) < 1e-3
        assert grad_check(fb, [rand((1, 2, 2), 8)]) < 1e-3


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_scale(self):
        np.testing.assert_array_equal(T.elementwise("scale", Tensor([1.0, -2.0]), 3.0).data, [3.0, -6.0])

    def test_gelu_values(self):
        out = T.gelu(Tensor([0.0])).data
        np.testing.assert_allclose(out, [0.0], atol=1e-12)

    def test_gelu_gradient(self):
        def f(x):
            return T.gelu(x).sum()

        assert grad_check(f, [rand((10,), 3)]) < 1e-3

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.add(rand((2, 3), 0), rand((3, 2), 1))
        with pytest.raises(ShapeError):
            T.mul(rand((2,), 0), rand((3,), 1))

    def test_scalar_broadcast(self):
        out = T.add(Tensor([[1.0, 2.0]]), 1.0)
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_suffix_broadcast_for_batch(self):
        pos = rand((3, 4), 0)
        x = rand((2, 3, 4), 1)
        out = T.add(x, pos)
        np.testing.assert_allclose(out.data, x.data + pos.data)

    def test_div_gradient(self):
        def f(a, b):
            return T.div(a, b).sum()

        assert grad_check(f, [rand((4,), 1), rand((4,), 2, lo=0.5, hi=2.0)]) < 1e-3


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic_gradient(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * x).backward()

    def test_double_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_detached_root_rejected(self):
        with pytest.raises(GraphError):
            Tensor(np.array(1.0)).backward()

    def test_reuse_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_shared_gradient_buffers_not_aliased(self):
        # two residual-style consumers of the same upstream gradient must
        # accumulate independently
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        s = a + b
        total = (s.sum() + a.sum())
        total.backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])
        np.testing.assert_array_equal(b.grad, [1.0, 1.0])


class TestNanGuard:
    def test_overflow_raises(self):
        x = Tensor(np.array([1e38], dtype=np.float32))
        with pytest.raises(NumericError):
            T.mul(x, x)

    def test_guard_can_be_disabled(self):
        x = Tensor(np.array([1e38], dtype=np.float32))
        prev = T.set_nan_guard(False)
        try:
            out = T.mul(x, x)
            assert np.isinf(out.data).any()
        finally:
            T.set_nan_guard(prev)


class TestDeterminism:
    def test_forward_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
            w = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
            return T.softmax(T.instance_norm(T.matmul(x, w)), axis=-1).data

        a, b = run(), run()
        assert (a == b).all()


class TestGradCheckItself:
    def test_sum_is_exact(self):
        def f(x):
            return x.sum()

        assert grad_check(f, [rand((3, 3), 0)]) < 1e-8

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(1)
        target = rng.integers(0, 3, size=(4, 4))

        def f(logits):
            return T.cross_entropy_logits(logits, target)

        assert grad_check(f, [rand((3, 4, 4), 2)]) < 1e-4


class TestCrossEntropy:
    def test_uniform_logits_binary(self):
        logits = Tensor(np.zeros((2, 2, 2)))
        target = np.array([[0, 1], [1, 0]])
        loss = T.cross_entropy_logits(logits, target)
        assert abs(loss.item() - np.log(2)) < 1e-6

    def test_bad_class_id(self):
        with pytest.raises(ValueError):
            T.cross_entropy_logits(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 7))
