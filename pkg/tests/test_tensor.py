import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swa_codec import tensor as tc
from swa_codec.tensor import BackwardError, DegenerateRowError, ShapeError, Tensor

from conftest import check_op_grad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


class TestConstruction:
    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_item_needs_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()
        assert Tensor([[2.5]]).item() == 2.5

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            tc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


class TestGradients:
    @pytest.mark.parametrize(
        "op",
        [tc.exp, tc.tanh, tc.softplus, tc.gelu, tc.ndtr, tc.neg, lambda x: tc.log(tc.add(tc.mul(x, x), 1.0))],
    )
    def test_unary(self, op, rng):
        check_op_grad(op, [rng.normal(size=(3, 4))])

    def test_binary_broadcast(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_op_grad(tc.add, [a, b])
        check_op_grad(tc.sub, [a, b])
        check_op_grad(tc.mul, [a, b])
        check_op_grad(tc.div, [a, b + 3.0])

    def test_matmul_and_linear(self, rng):
        check_op_grad(tc.matmul, [rng.normal(size=(5, 3)), rng.normal(size=(3, 2))])
        check_op_grad(tc.linear, [rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2,))])

    def test_layer_norm(self, rng):
        check_op_grad(
            lambda x, g, b: tc.layer_norm(x, g, b),
            [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)],
            atol=1e-6,
        )

    def test_softmax_masked(self, rng):
        x = rng.normal(size=(3, 5))
        mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], bool)
        check_op_grad(lambda t: tc.softmax_lastdim(tc.where(mask, t, -np.inf)), [x])

    def test_gather_and_concat(self, rng):
        idx = np.array([0, 2, 2, 1])
        check_op_grad(lambda x: tc.take_rows(x, idx), [rng.normal(size=(3, 2))])
        check_op_grad(lambda a, b: tc.concat_rows([a, b]), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))])
        check_op_grad(lambda a, b: tc.concat_cols([a, b]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))])
        check_op_grad(lambda x: tc.slice_cols(x, 1, 3), [rng.normal(size=(2, 4))])
        check_op_grad(tc.transpose, [rng.normal(size=(2, 3))])

    def test_scale_channels(self, rng):
        check_op_grad(tc.scale_channels, [rng.normal(size=(4, 3)), rng.normal(size=3)])

    def test_abs_and_clamp_away_from_kinks(self):
        x = np.array([[-1.5, -0.2, 0.3, 2.0]])
        check_op_grad(tc.absolute, [x])
        check_op_grad(lambda t: tc.clamp_min(t, 0.0), [x])

    @settings(max_examples=30, deadline=None)
    @given(arrays((3, 4)), arrays((4, 2)))
    def test_matmul_property(self, a, b):
        check_op_grad(lambda x, y: tc.tanh(tc.matmul(x, y)), [a, b], atol=1e-6)


class TestBackwardSemantics:
    def test_double_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tc.tensor_sum(tc.mul(x, x))
        tc.backward(loss)
        with pytest.raises(BackwardError):
            tc.backward(loss)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            tc.backward(tc.mul(x, 2.0))

    def test_disconnected_input_gets_zeros(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones((2, 2)), requires_grad=True)
        gx, gy = tc.backward(tc.tensor_sum(x), [x, y])
        np.testing.assert_array_equal(gx, 1.0)
        np.testing.assert_array_equal(gy, np.zeros((2, 2)))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = tc.mul(x, x)
        (g,) = tc.backward(tc.tensor_sum(tc.add(y, y)), [x])
        np.testing.assert_allclose(g, [8.0])

    def test_grad_accumulates_until_zeroed(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        tc.backward(tc.tensor_sum(tc.mul(x, 3.0)))
        tc.backward(tc.tensor_sum(tc.mul(x, 3.0)))
        np.testing.assert_allclose(x.grad, [6.0])
        x.zero_grad()
        tc.backward(tc.tensor_sum(x))
        np.testing.assert_allclose(x.grad, [1.0])


def test_degenerate_softmax_row():
    x = Tensor(np.array([[0.0, -np.inf], [-np.inf, -np.inf]]))
    with pytest.raises(DegenerateRowError):
        tc.softmax_lastdim(x)


def test_softmax_never_exponentiates_inf():
    x = Tensor(np.array([[1e308, -np.inf, 0.0]]))
    with np.errstate(over="raise", invalid="raise"):
        out = tc.softmax_lastdim(x)
    np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0]])


def test_mac_counter_records_matmul():
    with tc.count_macs() as counter:
        tc.matmul(Tensor(np.ones((5, 3))), Tensor(np.ones((3, 7))))
    assert counter["matmul"] == 5 * 3 * 7
    assert counter.total == 105
