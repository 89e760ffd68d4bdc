"""Tests for the reverse-mode autodiff core and the optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xvkd import autodiff as ad
from xvkd.autodiff import (
    DegenerateBatchError,
    Parameter,
    ShapeError,
    Tensor,
    affine,
    batch_norm,
    concat,
    context_splice,
    grad_check,
    relu,
    softmax,
    tdnn_conv,
)
from xvkd.optim import Adam, OptimizerError


def rand_param(rng, name, shape, scale=1.0):
    return Parameter(name, rng.normal(0.0, scale, size=shape))


class TestAffine:
    def test_zero_input_yields_bias(self):
        rng = np.random.default_rng(0)
        w = rand_param(rng, "w", (3, 2))
        b = Parameter("b", [1.0, 2.0])
        out = affine(Tensor(np.zeros((2, 3))), w, b)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [1.0, 2.0]])

    def test_identity_weight_passthrough(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 3))
        out = affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_matrix_multiply(self):
        out = affine(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)))


class TestTdnnConv:
    def test_single_offset_equals_affine_bitwise(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(5, 4)))
        w = rand_param(rng, "w", (4, 3))
        b = rand_param(rng, "b", (3,))
        conv = tdnn_conv(x, w, b, (0,))
        aff = affine(x, w, b)
        assert (conv.data == aff.data).all()

    def test_constant_input_interior_frames_equal(self):
        rng = np.random.default_rng(3)
        x = Tensor(np.tile(rng.normal(size=4), (6, 1)))
        w = rand_param(rng, "w", (12, 3))
        b = rand_param(rng, "b", (3,))
        out = tdnn_conv(x, w, b, (-1, 0, 1)).data
        for t in range(1, 5):
            np.testing.assert_allclose(out[t], out[1], atol=1e-12)

    def test_hand_convolution_with_zero_padding(self):
        out = tdnn_conv(
            Tensor([[1.0], [2.0], [3.0]]),
            Tensor([[1.0], [1.0], [1.0]]),
            Tensor([0.0]),
            (-1, 0, 1),
        )
        np.testing.assert_array_equal(out.data.ravel(), [3.0, 6.0, 5.0])

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError):
            context_splice(Tensor(np.zeros((0, 3))), (0,))

    def test_unsorted_offsets_rejected(self):
        with pytest.raises(ShapeError):
            context_splice(Tensor(np.zeros((3, 2))), (1, 0))


class TestElementwise:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_softmax_constant_vector_uniform(self):
        for n in (2, 5, 9):
            out = softmax(Tensor(np.full(n, 3.7)))
            np.testing.assert_allclose(out.data, np.full(n, 1.0 / n), atol=1e-15)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0.0, 5.0, size=(6, 7))
        out = softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=11)
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_batch_norm_hand_values(self):
        # mean 1, biased variance 1 -> +-1/sqrt(1 + eps)
        gamma = Parameter("g", [1.0])
        beta = Parameter("be", [0.0])
        rm, rv = np.zeros(1), np.ones(1)
        out = batch_norm(Tensor([[0.0], [2.0]]), gamma, beta, rm, rv, training=True, eps=1e-5)
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data.ravel(), [-expected, expected], atol=1e-12)

    def test_batch_norm_single_frame_training_rejected(self):
        gamma, beta = Parameter("g", [1.0]), Parameter("be", [0.0])
        with pytest.raises(DegenerateBatchError):
            batch_norm(Tensor([[1.0]]), gamma, beta, np.zeros(1), np.ones(1), training=True)

    def test_batch_norm_inference_uses_running_stats(self):
        gamma, beta = Parameter("g", [2.0]), Parameter("be", [1.0])
        rm, rv = np.array([3.0]), np.array([4.0])
        out = batch_norm(Tensor([[5.0]]), gamma, beta, rm, rv, training=False, eps=0.0)
        np.testing.assert_allclose(out.data.ravel(), [2.0 * (5.0 - 3.0) / 2.0 + 1.0])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(6)
        w = rand_param(rng, "w", (3, 4))
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self):
        w = Parameter("w", [1.0, 2.0])
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_backward_twice_doubles_exactly(self):
        rng = np.random.default_rng(7)
        w = rand_param(rng, "w", (5,))

        def loss():
            return (w * w * w).sum()

        loss().backward()
        once = w.grad.copy()
        loss().backward()
        assert (w.grad == 2.0 * once).all()

    def test_non_scalar_loss_rejected(self):
        w = Parameter("w", [1.0, 2.0])
        with pytest.raises(ShapeError):
            (w * w).backward()

    def test_frame_kd_loss_gradient_matches_finite_differences(self):
        from xvkd.distill import frame_kd_loss

        rng = np.random.default_rng(8)
        student = rand_param(rng, "student", (1, 2, 3))
        teacher = Tensor(rng.normal(size=(1, 2, 3)))
        err = grad_check(lambda: frame_kd_loss(teacher, student), [student])
        assert err < 1e-4


class TestGradCheck:
    def test_linear_function_at_noise_level(self):
        rng = np.random.default_rng(9)
        w = rand_param(rng, "w", (6,))
        c = rng.normal(size=6)
        err = grad_check(lambda: (w * c).sum(), [w])
        assert err < 1e-8

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(10)
        w = Parameter("w", rng.choice([-1.0, 1.0], size=8) * rng.uniform(0.5, 2.0, size=8))
        err = grad_check(lambda: relu(Tensor(1.0) * w).sum(), [w])
        assert err < 1e-6

    def test_non_finite_loss_reported_as_failure(self):
        w = Parameter("w", [-1.0])
        with np.errstate(invalid="ignore"):
            err = grad_check(lambda: ad.log(w).sum(), [w])
        assert err == float("inf")

    def test_rejects_nonpositive_epsilon(self):
        w = Parameter("w", [1.0])
        with pytest.raises(ValueError):
            grad_check(lambda: w.sum(), [w], epsilon=0.0)


class TestPerOpGradients:
    """Finite-difference checks for every differentiable primitive."""

    @pytest.mark.parametrize(
        "name",
        [
            "add",
            "sub",
            "mul",
            "div",
            "matmul",
            "matmul_batched",
            "pow",
            "sum_axis",
            "mean",
            "reshape",
            "swap",
            "concat",
            "exp",
            "log",
            "sqrt",
            "tanh",
            "relu",
            "maximum",
            "clip",
            "softmax",
            "logsumexp",
            "splice",
            "batch_norm",
        ],
    )
    def test_gradient(self, name):
        import zlib

        rng = np.random.default_rng(zlib.crc32(name.encode()))
        a = rand_param(rng, "a", (4, 5))
        b = rand_param(rng, "b", (4, 5))
        row = rand_param(rng, "row", (5,))
        losses = {
            "add": lambda: ((a + row) * (a + row)).sum(),
            "sub": lambda: ((a - row) * (a - b)).sum(),
            "mul": lambda: (a * b * row).sum(),
            "div": lambda: (a / (b * b + 1.0)).sum(),
            "matmul": lambda: (a @ b.swap_last_axes()).sum(),
            "matmul_batched": lambda: (
                c3 @ b2
            ).sum(),
            "pow": lambda: ((a * a + 1.0) ** 1.5).sum(),
            "sum_axis": lambda: (a.sum(axis=0) * row).sum(),
            "mean": lambda: (a.mean(axis=1) * a.mean(axis=1)).sum(),
            "reshape": lambda: (a.reshape(2, 10) * a.reshape(2, 10)).sum(),
            "swap": lambda: (a.swap_last_axes() @ b).sum(),
            "concat": lambda: (concat([a, b], axis=1) * concat([b, a], axis=1)).sum(),
            "exp": lambda: ad.exp(a * 0.3).sum(),
            "log": lambda: ad.log(a * a + 1.0).sum(),
            "sqrt": lambda: ad.sqrt(a * a + 1.0).sum(),
            "tanh": lambda: (ad.tanh(a) * row).sum(),
            "relu": lambda: (relu(a) * b).sum(),
            "maximum": lambda: ad.maximum(a, 0.25).sum(),
            "clip": lambda: ad.clip(a, -0.75, 0.75).sum(),
            "softmax": lambda: (softmax(a, axis=-1) * b).sum(),
            "logsumexp": lambda: ad.logsumexp(a, axis=-1).sum(),
            "splice": lambda: (context_splice(a, (-1, 0, 2)) ** 2.0).sum(),
            "batch_norm": lambda: (
                batch_norm(a, row, rb, np.zeros(5), np.ones(5), training=True) * b
            ).sum(),
        }
        c3 = rand_param(rng, "c3", (2, 3, 5))
        b2 = rand_param(rng, "b2", (5, 4))
        rb = rand_param(rng, "rb", (5,))
        params = [a, b, row, c3, b2, rb]
        err = grad_check(losses[name], params)
        assert err < 1e-4, f"{name}: relative error {err}"


class TestBroadcastProperties:
    @given(
        rows=st.integers(min_value=1, max_value=4),
        cols=st.integers(min_value=1, max_value=4),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    @settings(max_examples=25, deadline=None)
    def test_row_broadcast_gradients_match_finite_differences(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        mat = rand_param(rng, "mat", (rows, cols))
        vec = rand_param(rng, "vec", (cols,))
        err = grad_check(lambda: ((mat + vec) * (mat * vec)).sum(), [mat, vec])
        assert err < 1e-4

    @given(seed=st.integers(min_value=0, max_value=2**16))
    @settings(max_examples=25, deadline=None)
    def test_softmax_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0.0, 10.0, size=(3, 6))
        out = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out >= 0.0).all()


class TestNoGrad:
    def test_no_graph_recorded(self):
        w = Parameter("w", [1.0, 2.0])
        with ad.no_grad():
            out = (w * w).sum()
        assert out.requires_grad is False
        assert out._grad_fn is None

    def test_grad_mode_restored(self):
        w = Parameter("w", [1.0])
        with ad.no_grad():
            pass
        loss = (w * w).sum()
        loss.backward()
        np.testing.assert_array_equal(w.grad, [2.0])


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        w = Parameter("w", [1.0, -2.0])
        w.grad = np.zeros(2)
        opt = Adam([w])
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        assert opt.step_count == 1

    def test_single_step_descends_on_quadratic(self):
        w = Parameter("w", [1.0])
        opt = Adam([w], learning_rate=1e-3)
        (w * w).sum().backward()
        opt.step()
        assert abs(w.data[0]) < 1.0

    def test_fifty_steps_reach_small_loss_with_tail_monotone(self):
        scale = np.array([1.0, 4.0])
        w = Parameter("w", [2.0, 1.0])
        opt = Adam([w], learning_rate=0.1)
        losses = []
        for _ in range(50):
            loss = (w * w * scale).sum()
            losses.append(loss.item())
            loss.backward()
            opt.step()
        losses.append(float((w.data**2 * scale).sum()))
        assert losses[-1] < 1e-3 * losses[0]
        # warm-up exists: the trailing section is monotone non-increasing
        warmup = len(losses) - 1
        for i in range(len(losses) - 1, -1, -1):
            if all(losses[j + 1] <= losses[j] + 1e-15 for j in range(i, len(losses) - 1)):
                warmup = i
            else:
                break
        assert warmup <= 40

    def test_gradients_cleared_after_step(self):
        w = Parameter("w", [1.0])
        (w * w).sum().backward()
        opt = Adam([w])
        opt.step()
        assert w.grad is None

    def test_missing_gradient_names_parameter(self):
        w = Parameter("fc1.weight", [1.0])
        opt = Adam([w])
        with pytest.raises(OptimizerError, match="fc1.weight"):
            opt.step()
