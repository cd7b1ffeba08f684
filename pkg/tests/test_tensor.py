"""Forward values and gradients of every tensor-core operation."""

import numpy as np
import pytest

from vseg.tensor import (
    Tensor,
    add,
    backward,
    channel_softmax,
    clamp,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dense,
    global_avg_pool3d,
    leaky_relu,
    log,
    max_pool3d,
    scale_channels,
    sigmoid,
    softmax,
    tsum,
)

from helpers import fd_check_op, naive_conv3d, numeric_grad, rel_err

SEEDS = range(20)


def _zeros(n):
    return Tensor(np.zeros(n))


class TestTensorBasics:
    def test_data_is_float64(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float64

    def test_grad_buffer_matches_shape(self):
        t = Tensor(np.ones((2, 3)), requires_grad=True)
        assert t.grad.shape == (2, 3)
        assert not Tensor(np.ones(2)).requires_grad

    def test_zero_sized_axes_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 0, 3)))

    def test_elementwise_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="add"):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


class TestConv3d:
    def test_one_cubed_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 3, 3, 3)))
        w = np.zeros((2, 2, 1, 1, 1))
        w[0, 0], w[1, 1] = 1.0, 1.0
        out = conv3d(x, Tensor(w), _zeros(2))
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_counts_taps(self):
        out = conv3d(
            Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), _zeros(1)
        )
        assert out.shape == (1, 1, 1, 1, 1)
        assert out.item() == 27.0

    def test_matches_naive_oracle_strided_padded(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, (1, 2, 4, 4, 4))
        w = rng.uniform(-1, 1, (3, 2, 3, 3, 3))
        b = rng.uniform(-1, 1, 3)
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
        want = naive_conv3d(x, w, b, (2, 2, 2), (1, 1, 1))
        assert np.abs(out.data - want).max() < 1e-12

    def test_channel_mismatch_named(self):
        with pytest.raises(ValueError, match="Kin"):
            conv3d(Tensor(np.ones((1, 3, 4, 4, 4))), Tensor(np.ones((2, 2, 3, 3, 3))), _zeros(2))

    def test_empty_output_axis_named(self):
        with pytest.raises(ValueError, match="axis S"):
            conv3d(Tensor(np.ones((1, 1, 2, 8, 8))), Tensor(np.ones((1, 1, 3, 3, 3))), _zeros(1))

    def test_gradients(self):
        fd_check_op(
            lambda x, w, b: conv3d(x, w, b, stride=2, padding=1),
            [(1, 2, 4, 4, 4), (2, 2, 3, 3, 3), (2,)],
            SEEDS,
        )


class TestConvTranspose3d:
    def test_stride2_scatters_on_even_lattice(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (1, 1, 2, 2, 2))
        w = np.zeros((1, 1, 2, 2, 2))
        w[0, 0, 0, 0, 0] = 1.0
        out = conv_transpose3d(Tensor(x), Tensor(w), _zeros(1), stride=2)
        assert out.shape == (1, 1, 4, 4, 4)
        np.testing.assert_array_equal(out.data[0, 0, ::2, ::2, ::2], x[0, 0])
        lattice = np.zeros((4, 4, 4), dtype=bool)
        lattice[::2, ::2, ::2] = True
        assert np.all(out.data[0, 0][~lattice] == 0.0)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 6), (2, 1, 5), (2, 0, 5), (3, 1, 7)])
    def test_adjoint_of_conv3d(self, stride, pad, size):
        # Matching geometry: (size + 2*pad - k) divisible by stride, so the
        # transpose's natural output extent equals the forward's input extent.
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.uniform(-1, 1, (2, 2, size, size, size))
        w = rng.uniform(-1, 1, (3, 2, 3, 3, 3))
        ax = conv3d(Tensor(x), Tensor(w), _zeros(3), stride=stride, padding=pad)
        y = rng.uniform(-1, 1, ax.shape)
        aty = conv_transpose3d(Tensor(y), Tensor(w), _zeros(2), stride=stride, padding=pad)
        assert aty.shape == x.shape
        lhs = float((ax.data * y).sum())
        rhs = float((x * aty.data).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_gradients(self):
        fd_check_op(
            lambda x, w, b: conv_transpose3d(x, w, b, stride=2, padding=1),
            [(1, 2, 3, 3, 3), (2, 3, 3, 3, 3), (3,)],
            SEEDS,
        )


class TestActivations:
    def test_leaky_relu_values(self):
        out = leaky_relu(Tensor([2.0, -3.0]), slope=0.01)
        np.testing.assert_allclose(out.data, [2.0, -0.03])

    def test_leaky_relu_slope_domain(self):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([1.0]), slope=1.5)

    def test_leaky_relu_gradient_negative_side(self):
        x = np.array([-1.0])
        t = Tensor(x, requires_grad=True)
        leaky_relu(t, slope=0.01).sum().backward()
        num = numeric_grad(lambda: float(np.where(x >= 0, x, 0.01 * x).sum()), x)
        assert rel_err(t.grad, num) < 1e-6
        assert abs(t.grad[0] - 0.01) < 1e-9

    def test_leaky_relu_fd(self):
        fd_check_op(lambda x: leaky_relu(x, 0.2), [(3, 4, 5)], SEEDS, kink_margin=1e-3)

    def test_sigmoid_values(self):
        assert sigmoid(Tensor([0.0])).data[0] == 0.5
        big = sigmoid(Tensor([40.0, -40.0])).data
        assert abs(big[0] - 1.0) < 1e-12 and 0.0 < big[1] < 1e-12
        assert np.isfinite(sigmoid(Tensor([1e4, -1e4])).data).all()

    def test_sigmoid_derivative_at_zero(self):
        x = np.array([0.0])
        t = Tensor(x, requires_grad=True)
        sigmoid(t).sum().backward()
        num = numeric_grad(lambda: float(1.0 / (1.0 + np.exp(-x)).sum()), x)
        assert rel_err(t.grad, num) < 1e-6
        assert abs(t.grad[0] - 0.25) < 1e-12

    def test_sigmoid_fd(self):
        fd_check_op(sigmoid, [(4, 4)], SEEDS)


class TestSoftmax:
    def test_uniform_logits(self):
        out = channel_softmax(Tensor(np.zeros((1, 10, 2, 2, 2))))
        np.testing.assert_allclose(out.data, 0.1)

    def test_huge_logits_stable(self):
        out = softmax(Tensor(np.full((3, 1), 1000.0)), axis=0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, 1.0 / 3.0)

    def test_sums_to_one_at_large_magnitude(self):
        # Whole-voxel offsets of magnitude 1e4 with representable channel gaps:
        # outputs stay strictly inside (0, 1) and normalize to 1e-12.
        rng = np.random.default_rng(5)
        offsets = rng.uniform(-1e4, 1e4, (1, 1, 3, 3, 3))
        logits = offsets + rng.uniform(-15.0, 15.0, (1, 6, 3, 3, 3))
        p = channel_softmax(Tensor(logits)).data
        assert np.all(p > 0.0) and np.all(p < 1.0)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12
        # Gaps beyond float64's exponent range underflow to exact 0 but never
        # produce non-finite values, and normalization still holds.
        wild = channel_softmax(Tensor(rng.uniform(-1e4, 1e4, (1, 6, 3, 3, 3)))).data
        assert np.isfinite(wild).all()
        assert np.all(wild >= 0.0) and np.all(wild <= 1.0)
        assert np.abs(wild.sum(axis=1) - 1.0).max() < 1e-12

    def test_needs_two_channels(self):
        with pytest.raises(ValueError, match="channels"):
            channel_softmax(Tensor(np.zeros((1, 1, 2, 2, 2))))

    def test_jacobian_vector_products(self):
        fd_check_op(lambda x: softmax(x, axis=1), [(2, 5, 4)], SEEDS)


class TestPoolingAndDense:
    def test_global_pool_constant(self):
        x = np.full((1, 3, 2, 2, 2), 0.0)
        x[0, 1] = 7.5
        out = global_avg_pool3d(Tensor(x))
        np.testing.assert_allclose(out.data, [[0.0, 7.5, 0.0]])

    def test_global_pool_counting(self):
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 0, 0, 0] = 1.0
        assert global_avg_pool3d(Tensor(x)).data[0, 0] == 0.125

    def test_global_pool_fd(self):
        fd_check_op(global_avg_pool3d, [(2, 3, 2, 2, 2)], SEEDS)

    def test_max_pool_forward(self):
        x = np.arange(64, dtype=np.float64).reshape(1, 1, 4, 4, 4)
        out = max_pool3d(Tensor(x), kernel=2)
        assert out.shape == (1, 1, 2, 2, 2)
        assert out.data[0, 0, 0, 0, 0] == x[0, 0, 1, 1, 1]
        assert out.data[0, 0, 1, 1, 1] == 63.0

    def test_max_pool_fd(self):
        fd_check_op(lambda x: max_pool3d(x, 2), [(1, 2, 4, 4, 4)], SEEDS, kink_margin=1e-3)

    def test_dense_identity_and_hand_case(self):
        x = Tensor(np.array([[3.0, -1.0]]))
        out = dense(x, Tensor(np.eye(2)), _zeros(2))
        np.testing.assert_array_equal(out.data, x.data)
        val = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0]]), Tensor([0.5]))
        assert val.data[0, 0] == 3.5

    def test_dense_shape_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), _zeros(2))

    def test_dense_fd(self):
        fd_check_op(dense, [(3, 4), (2, 4), (2,)], SEEDS)


class TestStructuralOps:
    def test_concat_order(self):
        a = Tensor(np.ones((2, 2, 1, 1, 1)))
        b = Tensor(np.full((2, 3, 1, 1, 1), 2.0))
        out = concat_channels(a, b)
        assert out.shape == (2, 5, 1, 1, 1)
        np.testing.assert_array_equal(out.data[:, :2], a.data)
        np.testing.assert_array_equal(out.data[:, 2:], b.data)

    def test_concat_then_selecting_conv_projects_back(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (1, 2, 3, 3, 3))
        cat = concat_channels(Tensor(a), Tensor(np.zeros((1, 3, 3, 3, 3))))
        w = np.zeros((2, 5, 1, 1, 1))
        w[0, 0], w[1, 1] = 1.0, 1.0
        out = conv3d(cat, Tensor(w), _zeros(2))
        np.testing.assert_array_equal(out.data, a)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ValueError, match="axis"):
            concat_channels(Tensor(np.ones((1, 2, 3, 3, 3))), Tensor(np.ones((1, 2, 4, 3, 3))))

    def test_concat_gradient_routing(self):
        fd_check_op(concat_channels, [(1, 2, 2, 2, 2), (1, 3, 2, 2, 2)], SEEDS)

    def test_scale_channels_ones_is_identity(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (2, 3, 2, 2, 2))
        out = scale_channels(Tensor(x), Tensor(np.ones((2, 3))))
        np.testing.assert_array_equal(out.data, x)

    def test_scale_channels_zero_channel_blocks_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 2, 2, 2)), requires_grad=True)
        s = np.ones((1, 2))
        s[0, 1] = 0.0
        out = scale_channels(x, Tensor(s))
        assert np.all(out.data[:, 1] == 0.0)
        tsum(out).backward()
        assert np.all(x.grad[:, 1] == 0.0)
        assert np.all(x.grad[:, 0] == 1.0)

    def test_scale_channels_fd(self):
        fd_check_op(scale_channels, [(2, 3, 2, 2, 2), (2, 3)], SEEDS)


class TestElementwiseAndReductions:
    def test_add_mul_div_pow_log_clamp_fd(self):
        fd_check_op(lambda a, b: a + b, [(3, 4), (3, 4)], SEEDS)
        fd_check_op(lambda a, b: a * b, [(3, 4), (3, 4)], SEEDS)
        fd_check_op(lambda a, b: a / b, [(3, 4), (3, 4)], SEEDS, kink_margin=0.2)
        fd_check_op(lambda a: (a + 2.0) ** 1.7, [(3, 4)], SEEDS)
        fd_check_op(lambda a: log(a + 2.0), [(3, 4)], SEEDS)
        fd_check_op(lambda a: clamp(a, -0.5, 0.5), [(3, 4)], SEEDS, kink_margin=1e-3)
        fd_check_op(lambda a: tsum(a, axis=1), [(3, 4)], SEEDS)

    def test_scalar_broadcast(self):
        a = Tensor(np.arange(4.0), requires_grad=True)
        out = (1.0 - a) * 2.0
        np.testing.assert_allclose(out.data, [2.0, 0.0, -2.0, -4.0])
        tsum(out).backward()
        np.testing.assert_allclose(a.grad, -2.0)

    def test_pow_zero_base_fractional_exponent_has_finite_grad(self):
        t = Tensor([0.0, 4.0], requires_grad=True)
        (t**0.3).sum().backward()
        assert np.isfinite(t.grad).all()
        assert t.grad[0] == 0.0


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(8.0).reshape(2, 4), requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 4)))

    def test_half_square_gives_x(self):
        rng = np.random.default_rng(21)
        a = rng.uniform(-1, 1, (3, 3))
        x = Tensor(a, requires_grad=True)
        (tsum(x * x) * 0.5).backward()
        np.testing.assert_allclose(x.grad, a, atol=1e-15)

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(Tensor(np.ones(3), requires_grad=True))

    def test_accumulation_without_reset(self):
        x = Tensor(np.ones(4), requires_grad=True)
        loss = tsum(x * x)
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2.0 * first)
        x.zero_grad()
        assert np.all(x.grad == 0.0)

    def test_shared_subexpression_counted_once_per_use(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        (y * y).sum().backward()
        # d/dx (2x)^2 = 8x = 24
        assert abs(x.grad[0] - 24.0) < 1e-12

    @pytest.mark.parametrize("seed", SEEDS)
    def test_composite_graph_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, (1, 2, 4, 4, 4))
        w = rng.uniform(-1, 1, (2, 2, 3, 3, 3)) / 5.0
        s = rng.uniform(-1, 1, (1, 2))

        def forward(xv, wv, sv):
            h = conv3d(xv, wv, _zeros(2), stride=1, padding=1)
            h = leaky_relu(h, 0.1)
            h = scale_channels(h, sigmoid(sv))
            h = h + xv
            p = channel_softmax(h)
            return tsum(p * p)

        tens = [Tensor(a, requires_grad=True) for a in (x, w, s)]
        forward(*tens).backward()

        def scalar():
            from vseg.tensor import no_grad

            with no_grad():
                return forward(Tensor(x), Tensor(w), Tensor(s)).item()

        for t, a in zip(tens, (x, w, s)):
            assert rel_err(t.grad, numeric_grad(scalar, a)) < 1e-6
