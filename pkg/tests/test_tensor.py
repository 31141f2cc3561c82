import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedvit import tensor as T
from fedvit.tensor import GradTape, Tensor


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        out = T.matmul(Tensor([[1, 2]]), Tensor([[0], [0]]))
        np.testing.assert_array_equal(out.data, [[0]])

    def test_hand_arithmetic(self):
        # 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_shape_mismatch_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_backward_rules(self):
        a = leaf([[1.0, 2.0], [3.0, 4.0]])
        b = leaf([[5.0], [6.0]])
        with GradTape() as tape:
            tape.backward(T.tsum(T.matmul(a, b)))
        np.testing.assert_array_equal(a.grad, [[5, 6], [5, 6]])
        np.testing.assert_array_equal(b.grad, [[4], [6]])


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0]), 1.0).data, [0.5, 0.5])

    def test_temperature_closed_form(self):
        e = math.e
        np.testing.assert_allclose(T.softmax(Tensor([2.0, 0.0]), 2.0).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-6)
        np.testing.assert_allclose(T.softmax(Tensor([2.0, 0.0]), 2.0).data, [0.7311, 0.2689], atol=1e-4)

    @pytest.mark.parametrize("t", [0.1, 1.0, 7.0])
    def test_constant_row(self, t):
        np.testing.assert_allclose(T.softmax(Tensor([3.3, 3.3, 3.3]), t).data, [1 / 3] * 3, rtol=1e-6)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(T.ParameterError):
            T.softmax(Tensor([1.0, 2.0]), t)

    def test_large_logits_stay_finite(self):
        out = T.softmax(Tensor([1e4, -1e4, 0.0]), 1.0)
        assert np.all(np.isfinite(out.data))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)),
           st.floats(0.05, 20), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, t, c):
        s = T.softmax(Tensor(x), t).data
        np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-5)
        shifted = T.softmax(Tensor(x + np.float32(c)), t).data
        # translation by c is exact up to the float rounding of x + c itself
        np.testing.assert_allclose(shifted, s, atol=1e-6 + 1e-6 * abs(c))


class TestLayerNorm:
    def test_constant_vector_maps_to_bias(self):
        out = T.layer_norm(Tensor([5.0, 5, 5, 5]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_unit_std(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0])

    def test_zero_gain(self):
        b = np.array([0.5, -2.0, 3.0], dtype=np.float32)
        out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (4, 3)))

    def test_shape_check(self):
        with pytest.raises(T.ShapeError):
            T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


class TestCrossEntropy:
    def test_uniform(self):
        assert T.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_confident_correct(self):
        assert T.cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() == pytest.approx(0.0, abs=1e-6)

    def test_closed_form(self):
        assert T.cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(math.log(1 + math.e), rel=1e-6)
        assert T.cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(1.3133, abs=1e-4)

    def test_bad_label_reports_index(self):
        with pytest.raises(T.DataError, match="index 1"):
            T.cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])


class TestKL:
    def test_identical(self):
        p = Tensor([[0.5, 0.5]])
        assert T.kl_div(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_clamped_one_hot(self):
        # 1*ln(1/0.5) + 0*ln(eps/0.5) = ln 2
        assert T.kl_div(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_asymmetric(self):
        p, q = Tensor([[0.9, 0.1]]), Tensor([[0.5, 0.5]])
        assert T.kl_div(p, q).item() != pytest.approx(T.kl_div(q, p).item(), rel=1e-3)

    def test_rejects_non_probability_rows(self):
        with pytest.raises(T.ContractError):
            T.kl_div(Tensor([[0.7, 0.7]]), Tensor([[0.5, 0.5]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-8, 8)), arrays(np.float64, (4, 3), elements=st.floats(-8, 8)))
    def test_nonnegative_and_self_zero(self, a, b):
        p, q = T.softmax(Tensor(a), 1.0), T.softmax(Tensor(b), 1.0)
        assert T.kl_div(p, p).item() == pytest.approx(0.0, abs=1e-6)
        assert T.kl_div(p, q).item() >= -1e-6


class TestBackward:
    def test_sum_linear(self):
        w = leaf([1.0, 2.0, 3.0])
        with GradTape() as tape:
            tape.backward(T.tsum(w))
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        w = leaf([1.0, 2.0])
        with GradTape() as tape:
            tape.backward(T.tsum(T.mul(w, w)))
        np.testing.assert_array_equal(w.grad, [2, 4])

    def test_disconnected_gets_zero(self):
        w, u = leaf([1.0, 2.0]), leaf([3.0])
        with GradTape() as tape:
            tape.backward(T.tsum(T.mul(u, u)), params=[w])
        np.testing.assert_array_equal(w.grad, [0, 0])

    def test_non_scalar_loss(self):
        w = leaf([1.0, 2.0])
        with GradTape() as tape:
            with pytest.raises(T.UsageError):
                tape.backward(T.mul(w, w))

    def test_tape_cleared_and_reverse_order(self):
        w = leaf([1.0, 2.0])
        seen = []
        with GradTape() as tape:
            a = T.scale(w, 2.0)
            b = T.exp(a)
            loss = T.tsum(b)
            for i, node in enumerate(tape.nodes):
                fn = node.backward
                node.backward = (lambda f, i: lambda g: (seen.append(i), f(g))[1])(fn, i)
            tape.backward(loss)
            assert len(tape) == 0
        assert seen == [2, 1, 0]

    def test_no_tape_records_nothing(self):
        w = leaf([1.0])
        out = T.mul(w, w)
        assert not out.requires_grad


def _rand(rng, shape):
    return rng.normal(size=shape)


OPS = {
    "matmul": (lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: T.tsum(T.exp(T.scale(T.matmul(a, b), 0.3))), [(2, 3, 4), (2, 4, 3)]),
    "broadcast_matmul": (lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "add_broadcast": (lambda a, b: T.tsum(T.exp(T.add(a, b))), [(3, 4), (4,)]),
    "sub_mul": (lambda a, b: T.tsum(T.mul(T.sub(a, b), a)), [(2, 5), (2, 5)]),
    "gelu": (lambda a: T.tsum(T.gelu(a)), [(4, 6)]),
    "softmax_T": (lambda a, w: T.tsum(T.mul(T.softmax(a, 2.5), w)), [(3, 5), (3, 5)]),
    "layer_norm": (lambda x, g, b, w: T.tsum(T.mul(T.layer_norm(x, g, b), w)), [(3, 6), (6,), (6,), (3, 6)]),
    "cross_entropy": (lambda a: T.cross_entropy(a, [0, 2, 1, 1]), [(4, 3)]),
    "kl": (lambda a, b: T.kl_div(T.softmax(a, 1.7), T.softmax(b, 1.7)), [(3, 4), (3, 4)]),
    "reshape_transpose_index": (
        lambda a, w: T.tsum(T.mul(T.transpose(T.reshape(a, (2, 3, 4)), (2, 0, 1))[1], w)), [(6, 4), (2, 3)]),
    "concat": (lambda a, b: T.tsum(T.exp(T.scale(T.concat([a, b], axis=1), 0.5))), [(2, 3), (2, 2)]),
    "mean_log": (lambda a: T.mean(T.log(T.exp(a) + 1.0)), [(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_op_grad_check(name, seed):
    f, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    params = [leaf(_rand(rng, s)) for s in shapes]
    assert T.grad_check(lambda: f(*params), params, h=1e-4) < 1e-2


def test_grad_check_quadratic_and_linear():
    w = leaf(np.random.default_rng(3).normal(size=5))
    assert T.grad_check(lambda: T.tsum(T.mul(w, w)), [w], h=1e-3) < 1e-3
    c = Tensor(np.arange(5.0))
    assert T.grad_check(lambda: T.tsum(T.mul(w, c)), [w], h=1e-3) < 1e-9


def test_grad_check_sampling():
    w = leaf(np.random.default_rng(4).normal(size=(6, 5)))
    f = lambda: T.tsum(T.exp(T.scale(w, 0.3)))
    assert T.grad_check(f, [w], h=1e-4, max_coords=30) == T.grad_check(f, [w], h=1e-4)
    assert T.grad_check(f, [w], h=1e-4, max_coords=7, seed=1) < 1e-6
    # a backward that is wrong everywhere is caught from any sample
    broken = lambda: T.tsum(T._record((w,), w.data * 2.0, lambda g: (g * 3.0,)))
    assert T.grad_check(broken, [w], h=1e-4, max_coords=3) > 0.3


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16)).astype(np.float32)
    g, b = Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))
    a = T.softmax(T.layer_norm(Tensor(x), g, b), 3.0).data
    c = T.softmax(T.layer_norm(Tensor(x.copy()), g, b), 3.0).data
    assert a.tobytes() == c.tobytes()


def test_float32_default():
    out = T.matmul(Tensor([[1, 2]]), Tensor([[1], [1]]))
    assert out.data.dtype == np.float32
