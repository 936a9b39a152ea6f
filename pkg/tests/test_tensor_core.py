import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import (
    ContractError,
    DimensionError,
    InvertibilityError,
    NonFiniteError,
    NumericDomainError,
    OracleError,
)
from app.services.tensor_core import (
    GradTape,
    Tensor,
    active_tape,
    backward,
    broadcast_batch,
    concat,
    conv,
    cumsum,
    exp,
    finite_diff_check,
    gather,
    log,
    logabsdet,
    matmul,
    mean,
    reshape,
    sigmoid,
    softmax,
    softplus,
    split,
    sum_per_sample,
    tanh,
    tensor_sum,
    transpose,
)

RNG = np.random.default_rng(123)


class TestTensorValues:
    def test_rejects_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.inf])

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_log_of_non_positive_is_a_domain_error(self):
        with pytest.raises(NumericDomainError):
            log(Tensor([1.0, 0.0]))

    def test_division_by_zero_is_a_domain_error(self):
        with pytest.raises(NumericDomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_exp_overflow_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            exp(Tensor([1000.0]))


class TestBroadcasting:
    def test_scalar_operand(self):
        assert_array_equal((Tensor([[1.0, 2.0]]) * 3.0).data, [[3.0, 6.0]])

    def test_per_channel_vector_against_axis_one(self):
        x = Tensor(np.zeros((2, 3, 4, 5)))
        out = x + Tensor([1.0, 2.0, 3.0])
        assert out.shape == (2, 3, 4, 5)
        assert_array_equal(out.data[1, 2], np.full((4, 5), 3.0))

    def test_other_shapes_are_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))

    def test_per_channel_gradient_sums_over_batch_and_positions(self):
        bias = Tensor([0.5, -0.5], grad_enabled=True)
        x = Tensor(np.ones((3, 2, 4)))
        with GradTape() as tape:
            loss = tensor_sum(x + bias)
            grads = tape.backward(loss)
        assert_array_equal(grads[bias], [12.0, 12.0])


class TestTape:
    def test_ops_outside_a_tape_are_not_tracked(self):
        out = Tensor([1.0], grad_enabled=True) * 2.0
        assert not out.grad_enabled

    def test_tape_is_scoped_to_its_context(self):
        with GradTape() as tape:
            assert active_tape() is tape
        assert active_tape() is None

    def test_backward_without_tape(self):
        with pytest.raises(ContractError):
            backward(Tensor(1.0, grad_enabled=True))

    def test_backward_needs_scalar_loss(self):
        x = Tensor([1.0, 2.0], grad_enabled=True)
        with GradTape() as tape:
            y = x * x
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_backward_rejects_constant_loss(self):
        with GradTape() as tape:
            y = tensor_sum(Tensor([1.0, 2.0]))
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor([3.0], grad_enabled=True)
        with GradTape() as tape:
            loss = tensor_sum(x * x + x)
            grads = backward(loss)
        assert_allclose(grads[x], [7.0])
        assert len(tape) == 0

    def test_unused_leaf_gets_no_entry(self):
        x = Tensor([1.0], grad_enabled=True)
        unused = Tensor([2.0], grad_enabled=True)
        with GradTape() as tape:
            grads = tape.backward(tensor_sum(x * 2.0))
        assert unused not in grads
        assert_allclose(grads[x], [2.0])


class TestGradientOracle:
    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: tensor_sum(tanh(t) * sigmoid(t)),
            lambda t: tensor_sum(softplus(t) / (exp(t) + 1.0)),
            lambda t: tensor_sum(softmax(t, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))),
            lambda t: tensor_sum(cumsum(t, axis=1) * cumsum(t, axis=1)),
            lambda t: mean(transpose(reshape(t, (4, 3)), (1, 0)) * 2.0),
        ],
        ids=["tanh-sigmoid", "softplus-div", "softmax", "cumsum", "reshape-transpose"],
    )
    def test_elementwise_and_structural_ops(self, fn):
        x = Tensor(RNG.standard_normal((3, 4)))
        assert finite_diff_check(fn, x) < 1e-5

    def test_matmul(self):
        w = Tensor(RNG.standard_normal((4, 3)))
        x = Tensor(RNG.standard_normal((2, 4)))
        assert finite_diff_check(lambda t: tensor_sum(tanh(matmul(t, w))), x) < 1e-5

    @pytest.mark.parametrize("padding", ["zero-same", "causal"])
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_conv_input_gradient(self, padding, dilation):
        kernel = Tensor(RNG.standard_normal((3, 2, 3, 3)))
        x = Tensor(RNG.standard_normal((2, 2, 5, 4)))
        fn = lambda t: tensor_sum(tanh(conv(t, kernel, dilation=dilation, padding_mode=padding)))  # noqa: E731
        assert finite_diff_check(fn, x) < 1e-5

    def test_conv_kernel_gradient(self):
        x = Tensor(RNG.standard_normal((2, 2, 6)))
        fn = lambda k: tensor_sum(tanh(conv(x, k, padding_mode="causal")))  # noqa: E731
        assert finite_diff_check(fn, Tensor(RNG.standard_normal((3, 2, 3)))) < 1e-5

    @pytest.mark.parametrize("padding", ["zero-same", "causal"])
    @pytest.mark.parametrize("dilation", [1, 2])
    def test_conv2d_kernel_gradient(self, padding, dilation):
        x = Tensor(RNG.standard_normal((2, 3, 5, 5)))
        fn = lambda k: tensor_sum(tanh(conv(x, k, dilation=dilation, padding_mode=padding)))  # noqa: E731
        assert finite_diff_check(fn, Tensor(0.3 * RNG.standard_normal((4, 3, 3, 3)))) < 1e-5

    def test_conv_kernel_gradient_through_backward(self):
        x = Tensor(RNG.standard_normal((2, 3, 5, 5)))
        kernel = Tensor(RNG.standard_normal((4, 3, 3, 3)), grad_enabled=True)
        with GradTape() as tape:
            grads = tape.backward(tensor_sum(conv(x, kernel)))
        assert grads[kernel].shape == (4, 3, 3, 3)
        # d(sum y)/dw[o, c, 1, 1] is the sum of input channel c
        assert_allclose(grads[kernel][:, :, 1, 1], np.broadcast_to(x.data.sum(axis=(0, 2, 3)), (4, 3)))

    def test_logabsdet(self):
        w = Tensor(RNG.standard_normal((3, 3)) + 3.0 * np.eye(3))
        assert finite_diff_check(logabsdet, w) < 1e-5

    def test_split_concat_gather(self):
        index = np.array([[0, 2, 1], [3, 3, 0]])

        def fn(t):
            a, b = split(t, -1, [2, 2])
            joined = concat([b, a], axis=-1)
            return tensor_sum(gather(joined * joined, index, axis=-1))

        assert finite_diff_check(fn, Tensor(RNG.standard_normal((2, 3, 4)))) < 1e-5

    def test_broadcast_batch_and_sum_per_sample(self):
        fn = lambda t: tensor_sum(tanh(sum_per_sample(broadcast_batch(t, 3) * 2.0)))  # noqa: E731
        assert finite_diff_check(fn, Tensor(RNG.standard_normal((2, 2)))) < 1e-5

    def test_non_deterministic_function_is_rejected(self):
        draws = iter(np.linspace(0.0, 1.0, 10))

        def noisy(t):
            return tensor_sum(t) + next(draws)

        with pytest.raises(OracleError):
            finite_diff_check(noisy, Tensor([1.0]))

    def test_step_must_be_positive(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: tensor_sum(t), Tensor([1.0]), step=0.0)


class TestConv:
    def test_causal_output_ignores_the_future(self):
        kernel = Tensor(RNG.standard_normal((2, 1, 3)))
        x = RNG.standard_normal((1, 1, 10))
        changed = x.copy()
        changed[0, 0, 6:] += 5.0
        a = conv(Tensor(x), kernel, dilation=2, padding_mode="causal").data
        b = conv(Tensor(changed), kernel, dilation=2, padding_mode="causal").data
        assert_array_equal(a[..., :6], b[..., :6])
        assert not np.allclose(a[..., 6:], b[..., 6:])

    def test_zero_same_keeps_spatial_size(self):
        out = conv(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 4, 4)
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 1, 1] == 9.0

    def test_even_kernel_is_rejected(self):
        with pytest.raises(ContractError):
            conv(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 1, 2))))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 3))))


class TestLinearAlgebra:
    def test_matmul_shapes(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_logabsdet_value(self):
        w = np.array([[2.0, 1.0], [0.0, -3.0]])
        assert logabsdet(Tensor(w)).item() == pytest.approx(np.log(6.0))

    def test_singular_matrix(self):
        with pytest.raises(InvertibilityError):
            logabsdet(Tensor([[1.0, 2.0], [2.0, 4.0]]))

    def test_split_must_partition_the_axis(self):
        with pytest.raises(DimensionError):
            split(Tensor(np.zeros((2, 5))), 1, [2, 2])
