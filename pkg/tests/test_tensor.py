import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtomnet import tensor as tn
from mtomnet.gradcheck import check_gradients, finite_diff_check
from mtomnet.tensor import Tape, Tensor

from conftest import grad_error, t64


def weighted_sum(y, w):
    return (y * Tensor(w)).sum()


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 4))
        out = tn.matmul(Tensor(np.eye(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.eye(3) @ b)

    def test_small_identity(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_gradient(self, rng):
        a, b = t64(rng, 5, 7), t64(rng, 7, 3)
        w = rng.normal(size=(5, 3))
        assert grad_error(lambda: weighted_sum(a @ b, w), [a, b]) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_linear_matches_matmul(self, rng):
        x, w, b = t64(rng, 4, 6), t64(rng, 3, 6), t64(rng, 3)
        y = tn.linear(x, w, b)
        np.testing.assert_allclose(y.data, x.data @ w.data.T + b.data)
        g = rng.normal(size=(4, 3))
        assert grad_error(lambda: weighted_sum(tn.linear(x, w, b), g), [x, w, b]) <= 1e-6


class TestElementwise:
    def test_add_zeros(self, rng):
        x = t64(rng, 3, 4)
        np.testing.assert_array_equal(tn.elementwise("add", x, Tensor(np.zeros((3, 4)))).data, x.data)

    def test_mul_ones(self, rng):
        x = t64(rng, 3, 4)
        np.testing.assert_array_equal(tn.elementwise("mul", x, Tensor(np.ones((3, 4)))).data, x.data)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_gradient(self, rng, op):
        a, b = t64(rng, 4, 4), t64(rng, 4, 4)
        w = rng.normal(size=(4, 4))
        assert grad_error(lambda: weighted_sum(tn.elementwise(op, a, b), w), [a, b]) <= 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_scalar_operands(self, rng):
        x = t64(rng, 2, 2)
        np.testing.assert_allclose((2.0 * x - 1.0).data, 2 * x.data - 1)

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            tn.elementwise("div", Tensor(np.ones(2)), Tensor(np.ones(2)))


class TestConcat:
    def test_single(self, rng):
        x = t64(rng, 2, 3)
        np.testing.assert_array_equal(tn.concat([x]).data, x.data)

    def test_shape(self, rng):
        assert tn.concat([t64(rng, 2, 3), t64(rng, 2, 5)], axis=1).shape == (2, 8)

    def test_backward_splits(self, rng):
        a, b = t64(rng, 2, 3), t64(rng, 2, 5)
        w = rng.normal(size=(2, 8))
        assert grad_error(lambda: weighted_sum(tn.concat([a, b], axis=1), w), [a, b]) <= 1e-6

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            tn.concat([])
        with pytest.raises(ValueError):
            tn.concat([t64(rng, 2, 3), t64(rng, 3, 3)], axis=1)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
    def test_concat_then_slice_is_identity(self, widths, rows):
        rng = np.random.default_rng(sum(widths) + rows)
        parts = [t64(rng, rows, w) for w in widths]
        whole = tn.concat(parts, axis=1)
        start = 0
        for p in parts:
            np.testing.assert_array_equal(whole[:, start:start + p.shape[1]].data, p.data)
            start += p.shape[1]


class TestConv2d:
    def test_zero_kernels_give_bias(self, rng):
        x = t64(rng, 2, 6, 7)
        out = tn.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5])))
        assert out.shape == (3, 4, 5)
        for c, b in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[c], b)

    def test_delta_kernel_crops(self, rng):
        x = t64(rng, 1, 5, 5)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = tn.conv2d(x, Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data[0], x.data[0, 1:4, 1:4])

    def test_matches_direct_loop(self, rng):
        x, k, b = t64(rng, 2, 6, 6), t64(rng, 4, 2, 3, 3), t64(rng, 4)
        out = tn.conv2d(x, k, b).data
        ref = np.zeros((4, 4, 4))
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[o, i, j] = (x.data[:, i:i + 3, j:j + 3] * k.data[o]).sum() + b.data[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_gradient(self, rng):
        x, k, b = t64(rng, 3, 8, 8), t64(rng, 2, 3, 3, 3), t64(rng, 2)
        w = rng.normal(size=(2, 6, 6))
        assert grad_error(lambda: weighted_sum(tn.conv2d(x, k, b), w), [x, k, b]) <= 1e-5

    def test_batched_equals_single(self, rng):
        x, k, b = t64(rng, 3, 2, 7, 7), t64(rng, 4, 2, 3, 3), t64(rng, 4)
        batched = tn.conv2d(x, k, b).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], tn.conv2d(Tensor(x.data[i]), k, b).data, atol=1e-12)

    def test_undersized(self):
        with pytest.raises(ValueError):
            tn.conv2d(Tensor(np.ones((1, 2, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


class TestPooling:
    def test_constant_input_ties_to_first(self):
        x = Tensor(np.full((1, 4, 4), 2.0), dtype=np.float64)
        with Tape() as tape:
            x.requires_grad = True
            y = tn.maxpool2d(x)
            s = y.sum()
        tape.backward(s)
        np.testing.assert_array_equal(y.data, np.full((1, 2, 2), 2.0))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(x.grad[0], expected)

    def test_single_window(self):
        assert tn.maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 4.0

    def test_odd_extent_floors(self, rng):
        assert tn.maxpool2d(t64(rng, 2, 7, 5)).shape == (2, 3, 2)

    def test_gradient(self, rng):
        # distinct values keep every window away from ties
        x = Tensor(rng.permutation(144).reshape(4, 6, 6) * 0.1, dtype=np.float64)
        w = rng.normal(size=(4, 3, 3))
        assert grad_error(lambda: weighted_sum(tn.maxpool2d(x), w), [x], h=1e-4) <= 1e-6

    def test_overlapping_windows(self, rng):
        x = Tensor(rng.permutation(50).reshape(2, 5, 5) * 0.1, dtype=np.float64)
        y = tn.maxpool2d(x, window=3, stride=1)
        assert y.shape == (2, 3, 3)
        assert y.data[0, 0, 0] == x.data[0, :3, :3].max()
        w = rng.normal(size=(2, 3, 3))
        assert grad_error(lambda: weighted_sum(tn.maxpool2d(x, 3, 1), w), [x], h=1e-4) <= 1e-6

    def test_global(self, rng):
        x = Tensor(rng.permutation(48).reshape(3, 4, 4) * 0.1, dtype=np.float64)
        np.testing.assert_array_equal(tn.global_maxpool(x).data, x.data.reshape(3, -1).max(axis=1))
        w = rng.normal(size=3)
        assert grad_error(lambda: weighted_sum(tn.global_maxpool(x), w), [x], h=1e-4) <= 1e-6

    def test_undersized(self):
        with pytest.raises(ValueError):
            tn.maxpool2d(Tensor(np.ones((1, 1, 3))))


class TestActivations:
    def test_fixed_points(self):
        assert tn.gelu(Tensor([0.0])).data.item() == 0.0
        assert tn.relu(Tensor([-1.0])).data.item() == 0.0

    def test_gelu_is_exact_erf_form(self):
        from math import erf, sqrt
        xs = [-2.0, -0.5, 0.5, 2.0]
        out = tn.gelu(Tensor(xs, dtype=np.float64)).data
        np.testing.assert_allclose(out, [x * 0.5 * (1 + erf(x / sqrt(2))) for x in xs], rtol=1e-15)

    def test_softmax_constant(self):
        np.testing.assert_allclose(tn.softmax(Tensor(np.full(5, 3.0))).data, 0.2)

    def test_gelu_gradient(self):
        x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]))
        x.data = x.data.astype(np.float64)
        assert grad_error(lambda: tn.gelu(x).sum(), [x], h=1e-6) <= 1e-8

    @pytest.mark.parametrize("fn", [tn.sigmoid, tn.tanh, tn.exp])
    def test_smooth_gradients(self, rng, fn):
        x = t64(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        assert grad_error(lambda: weighted_sum(fn(x), w), [x]) <= 1e-7

    @pytest.mark.parametrize("fn", [tn.softmax, tn.log_softmax])
    def test_softmax_gradients(self, rng, fn):
        x = t64(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        assert grad_error(lambda: weighted_sum(fn(x, axis=1), w), [x]) <= 1e-7

    def test_sigmoid_extremes_are_finite(self):
        y = tn.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        np.testing.assert_array_equal(y, [0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)))
    def test_softmax_is_distribution(self, x):
        s = tn.softmax(Tensor(x), axis=1).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        y = tn.layernorm(Tensor(np.full((2, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_standardized(self, rng):
        y = tn.layernorm(t64(rng, 4, 32, scale=3.0), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)

    def test_gradient(self, rng):
        x, g, b = t64(rng, 3, 16), t64(rng, 16), t64(rng, 16)
        w = rng.normal(size=(3, 16))
        assert grad_error(lambda: weighted_sum(tn.layernorm(x, g, b), w), [x, g, b]) <= 1e-6


class TestDropout:
    def test_eval_identity(self, rng):
        x = t64(rng, 5, 5)
        assert tn.dropout(x, 0.1, training=False, rng=None) is x

    def test_zero_p_identity(self, rng):
        x = t64(rng, 5, 5)
        np.testing.assert_array_equal(tn.dropout(x, 0.0, True, tn.make_rng(0)).data, x.data)

    def test_drop_rate(self):
        y = tn.dropout(Tensor(np.ones(10**6)), 0.1, True, tn.make_rng(7)).data
        assert abs((y == 0).mean() - 0.1) <= 0.003
        np.testing.assert_allclose(y[y != 0], 1 / 0.9, rtol=1e-6)

    def test_bad_p(self):
        with pytest.raises(ValueError):
            tn.dropout(Tensor(np.ones(3)), 1.0, True, tn.make_rng(0))

    def test_seeded_masks_repeat(self):
        a = tn.dropout(Tensor(np.ones(1000)), 0.3, True, tn.make_rng(42)).data
        b = tn.dropout(Tensor(np.ones(1000)), 0.3, True, tn.make_rng(42)).data
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng, 3, 2)
        x.requires_grad = True
        with Tape() as tape:
            loss = x.sum()
        tn.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self, rng):
        x = t64(rng, 4)
        x.requires_grad = True
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_reused_tensor_accumulates(self, rng):
        x = t64(rng, 3)
        x.requires_grad = True
        with Tape() as tape:
            loss = (x * x * x).sum() + x.sum()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 3 * x.data**2 + 1)

    def test_second_replay_rejected(self, rng):
        x = t64(rng, 3)
        x.requires_grad = True
        with Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_non_scalar_rejected(self, rng):
        x = t64(rng, 3)
        x.requires_grad = True
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_detached_gets_nothing(self, rng):
        x, y = t64(rng, 3), t64(rng, 3)
        x.requires_grad = True
        with Tape() as tape:
            loss = (x * y.detach()).sum()
        tape.backward(loss)
        assert y.grad is None

    def test_no_tape_records_nothing(self, rng):
        x = t64(rng, 3)
        x.requires_grad = True
        assert not (x * 2.0).requires_grad

    def test_non_finite_is_an_error(self):
        with pytest.raises(tn.NonFiniteError):
            tn.log(Tensor(np.array([0.0, 1.0])))

    def test_getitem_fancy_index_accumulates(self, rng):
        x = t64(rng, 5)
        idx = np.array([0, 0, 3])
        w = rng.normal(size=3)
        assert grad_error(lambda: weighted_sum(x[idx], w), [x]) <= 1e-7

    def test_broadcast_to_gradient(self, rng):
        x = t64(rng, 2, 1, 4)
        w = rng.normal(size=(2, 3, 4))
        assert grad_error(lambda: weighted_sum(tn.broadcast_to(x, (2, 3, 4)), w), [x]) <= 1e-7


class TestFiniteDiffCheck:
    def test_linear_is_exact(self, rng):
        w = rng.normal(size=(6,))
        x = t64(rng, 6)
        assert finite_diff_check(lambda v: (v * Tensor(w)).sum(), x) <= 1e-9

    def test_softmax_cross_entropy(self, rng):
        x = t64(rng, 7)
        err = finite_diff_check(lambda v: -tn.log_softmax(v)[3], x)
        assert err <= 1e-6

    def test_relu_kink_is_flagged(self):
        x = Tensor(np.array([0.0, 1.5]), dtype=np.float64)
        res = check_gradients(lambda v: tn.relu(v).sum(), x)
        assert (0, 0) in res.flagged
        assert res.max_rel_error <= 1e-9

    def test_wrong_gradient_is_not_flagged(self):
        def bad(v):
            # forward x^2 with a deliberately wrong backward rule
            return tn.custom_op(v.data**2, (v,), lambda g: (g * 3.0,), "bad").sum()

        res = check_gradients(bad, Tensor(np.array([1.0, 2.0]), dtype=np.float64))
        assert res.flagged == []
        assert res.max_rel_error > 0.1

    def test_rejects_non_scalar(self, rng):
        with pytest.raises(ValueError):
            finite_diff_check(lambda v: v * 2.0, t64(rng, 3))

    def test_restores_requires_grad(self, rng):
        x = t64(rng, 3)
        finite_diff_check(lambda v: (v * v).sum(), x)
        assert not x.requires_grad and x.grad is None


class TestRng:
    def test_same_seed_same_stream(self):
        assert tn.make_rng(123).random(50).tobytes() == tn.make_rng(123).random(50).tobytes()

    def test_different_seed(self):
        assert tn.make_rng(1).random(5).tobytes() != tn.make_rng(2).random(5).tobytes()
