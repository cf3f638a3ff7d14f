import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients, project
from sinckws import ops
from sinckws.tensor import NonFiniteError, Tape, Tensor, backward

F64 = np.float64


def T(x, **kw):
    return Tensor(np.asarray(x, dtype=F64), **kw)


def direct_conv(x, w, stride, pad, groups):
    """Triple-loop convolution by definition."""
    c_in, length = x.shape
    c_out, cg, k = w.shape
    xp = np.zeros((c_in, length + 2 * pad))
    xp[:, pad:pad + length] = x
    t_out = (length + 2 * pad - k) // stride + 1
    og = c_out // groups
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        grp = o // og
        for t in range(t_out):
            acc = 0.0
            for i in range(cg):
                for j in range(k):
                    acc += w[o, i, j] * xp[grp * cg + i, t * stride + j]
            out[o, t] = acc
    return out


class TestTensor:
    def test_rank_limit(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((1, 1, 1, 1)))

    def test_integer_data_becomes_float(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_item_requires_scalar(self):
        assert Tensor([2.5]).item() == 2.5
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()


class TestGroupedConv:
    def test_identity_kernel(self):
        out = ops.grouped_conv1d(T([[1, 2, 3]]), T([[[1]]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3]])

    def test_difference_kernel(self):
        out = ops.grouped_conv1d(T([[1, 2, 3]]), T([[[1, 0, -1]]]))
        np.testing.assert_array_equal(out.data, [[-2]])

    def test_zero_weights_grouped(self, rng):
        out = ops.grouped_conv1d(T(rng.normal(size=(2, 10))), T(np.zeros((4, 1, 3))), groups=2)
        assert out.shape == (4, 8)
        assert not out.data.any()

    @pytest.mark.parametrize("stride,pad,groups,k", [(1, 0, 1, 3), (2, 1, 1, 5), (3, 2, 2, 4), (1, 1, 4, 3)])
    def test_matches_direct_loop(self, rng, stride, pad, groups, k):
        x = rng.normal(size=(4, 17))
        w = rng.normal(size=(8, 4 // groups, k))
        out = ops.grouped_conv1d(T(x), T(w), stride=stride, padding=pad, groups=groups)
        np.testing.assert_allclose(out.data, direct_conv(x, w, stride, pad, groups), rtol=0, atol=1e-12)

    def test_output_length(self, rng):
        out = ops.grouped_conv1d(T(rng.normal(size=(1, 100))), T(rng.normal(size=(2, 1, 7))), stride=3, padding=2)
        assert out.shape[1] == (100 + 4 - 7) // 3 + 1

    def test_batched_equals_per_sample(self, rng):
        x = rng.normal(size=(3, 2, 20))
        w = T(rng.normal(size=(4, 2, 5)))
        batched = ops.grouped_conv1d(T(x), w, stride=2, padding=2).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], ops.grouped_conv1d(T(x[n]), w, stride=2, padding=2).data,
                                       atol=1e-12)

    def test_errors(self, rng):
        x = T(rng.normal(size=(3, 10)))
        with pytest.raises(ValueError):
            ops.grouped_conv1d(x, T(np.zeros((3, 1, 3))), groups=2)  # 2 does not divide 3
        with pytest.raises(ValueError):
            ops.grouped_conv1d(x, T(np.zeros((2, 2, 3))))  # channel mismatch
        with pytest.raises(ValueError):
            ops.grouped_conv1d(x, T(np.zeros((2, 3, 11))))  # kernel longer than input
        with pytest.raises(NonFiniteError):
            ops.grouped_conv1d(T([[np.inf, 1.0]]), T([[[1.0]]]))


class TestDepthwise:
    def test_unit_kernel_identity(self, rng):
        x = rng.normal(size=(2, 9))
        np.testing.assert_array_equal(ops.depthwise_conv1d(T(x), T(np.ones((2, 1, 1)))).data, x)

    def test_equals_grouped(self, rng):
        x, w = T(rng.normal(size=(4, 16))), T(rng.normal(size=(4, 1, 3)))
        np.testing.assert_array_equal(ops.depthwise_conv1d(x, w).data, ops.grouped_conv1d(x, w, groups=4).data)

    def test_zero_input(self, rng):
        out = ops.depthwise_conv1d(T(np.zeros((3, 8))), T(rng.normal(size=(3, 1, 3))), padding=1)
        assert not out.data.any()

    def test_channel_isolation(self, rng):
        x = rng.normal(size=(4, 16))
        w = T(rng.normal(size=(4, 1, 5)))
        base = ops.depthwise_conv1d(T(x), w, padding=2).data
        x[2] += rng.normal(size=16)
        moved = ops.depthwise_conv1d(T(x), w, padding=2).data
        np.testing.assert_array_equal(np.delete(base, 2, axis=0), np.delete(moved, 2, axis=0))
        assert not np.array_equal(base[2], moved[2])


class TestPooling:
    def test_avg_pool_hand(self):
        np.testing.assert_array_equal(ops.avg_pool1d(T([[1, 3, 5, 7]]), 2, 2).data, [[2, 6]])

    def test_avg_pool_constant_and_identity(self, rng):
        np.testing.assert_allclose(ops.avg_pool1d(T(np.full((2, 9), 3.5)), 3, 2).data, 3.5)
        x = rng.normal(size=(2, 7))
        np.testing.assert_array_equal(ops.avg_pool1d(T(x), 1, 1).data, x)

    def test_avg_pool_too_short(self):
        with pytest.raises(ValueError):
            ops.avg_pool1d(T([[1.0]]), 2)

    def test_global(self, rng):
        assert ops.global_avg_pool(T(np.full((1, 5), 4.0))).data[0] == 4.0
        assert ops.global_avg_pool(T(np.zeros((2, 5)))).data.tolist() == [0.0, 0.0]
        x = rng.normal(size=(3, 8))
        expect = [sum(row) / 8 for row in x.tolist()]
        np.testing.assert_allclose(ops.global_avg_pool(T(x)).data, expect, atol=1e-15)
        with pytest.raises(ValueError):
            ops.global_avg_pool(T(np.zeros((2, 0))))


class TestLinearAndLog:
    def test_linear_identity_and_zero(self, rng):
        x = rng.normal(size=3)
        np.testing.assert_array_equal(ops.linear(T(x), T(np.eye(3)), T(np.zeros(3))).data, x)
        b = rng.normal(size=2)
        np.testing.assert_array_equal(ops.linear(T(x), T(np.zeros((2, 3))), T(b)).data, b)

    def test_linear_dot_oracle(self, rng):
        x, w, b = rng.normal(size=3), rng.normal(size=(2, 3)), rng.normal(size=2)
        expect = [sum(w[i, j] * x[j] for j in range(3)) + b[i] for i in range(2)]
        np.testing.assert_allclose(ops.linear(T(x), T(w), T(b)).data, expect, atol=1e-14)

    def test_log_compress_values(self):
        out = ops.log_compress(T([0.0, math.e - 1, -(math.e - 1)])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(1.0, abs=1e-15)
        assert out[2] == out[1]

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
    def test_log_compress_even(self, xs):
        x = np.array(xs)
        np.testing.assert_array_equal(ops.log_compress(T(x)).data, ops.log_compress(T(-x)).data)

    def test_log_compress_zero_subgradient(self):
        x = T([0.0], requires_grad=True)
        with Tape() as tape:
            y = project(ops.log_compress(x), [1.0])
        backward(tape, y)
        assert x.grad[0] == 0.0


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 3, 50))
        state = ops.BNState.create(3, F64)
        out = ops.batchnorm1d(T(x), T(np.ones(3)), T(np.zeros(3)), state, training=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-4)
        assert state.num_batches_tracked == 1
        m = 200
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2)) * m / (m - 1))

    def test_zero_gamma_gives_beta(self, rng):
        beta = rng.normal(size=3)
        out = ops.batchnorm1d(T(rng.normal(size=(3, 10))), T(np.zeros(3)), T(beta),
                              ops.BNState.create(3, F64), training=True).data
        np.testing.assert_allclose(out, np.broadcast_to(beta[:, None], (3, 10)))

    def test_eval_closed_form(self, rng):
        state = ops.BNState(np.array([1.0, -2.0]), np.array([4.0, 0.25]), num_batches_tracked=5)
        x = rng.normal(size=(2, 6))
        g, b = np.array([2.0, 0.5]), np.array([0.1, -0.3])
        out = ops.batchnorm1d(T(x), T(g), T(b), state, training=False).data
        expect = np.empty_like(x)
        for c in range(2):
            for t in range(6):
                expect[c, t] = g[c] * (x[c, t] - state.running_mean[c]) / math.sqrt(state.running_var[c] + 1e-5) + b[c]
        np.testing.assert_allclose(out, expect, atol=1e-14)

    def test_eval_without_stats(self):
        with pytest.raises(RuntimeError):
            ops.batchnorm1d(T(np.zeros((1, 4))), T([1.0]), T([0.0]), ops.BNState.create(1), training=False)


class TestDropout:
    def test_identity_cases(self, rng):
        x = T(rng.normal(size=(3, 5)))
        assert ops.spatial_dropout(x, 0.0, True, rng) is x
        assert ops.spatial_dropout(x, 0.5, False, None) is x

    def test_rate_validation(self, rng):
        with pytest.raises(ValueError):
            ops.spatial_dropout(T(np.ones((1, 1))), 1.0, True, rng)
        with pytest.raises(ValueError):
            ops.spatial_dropout(T(np.ones((1, 1))), -0.1, True, rng)

    def test_whole_channels_and_scaling(self, rng):
        out = ops.spatial_dropout(T(np.ones((50, 7))), 0.4, True, rng).data
        for row in out:
            assert np.all(row == 0) or np.allclose(row, 1 / 0.6)

    def test_monte_carlo_rate(self):
        rng = np.random.default_rng(7)
        p = 0.3
        out = ops.spatial_dropout(T(np.ones((10_000, 1, 2))), p, True, rng).data
        dropped = float(np.mean(out[:, 0, 0] == 0))
        assert abs(dropped - p) < 0.02


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ops.weighted_softmax_cross_entropy(T(np.zeros(12)), 3)
        assert loss.item() == pytest.approx(math.log(12), abs=1e-14)

    def test_confident_limit(self):
        z = np.zeros(12)
        z[5] = 40.0
        assert ops.weighted_softmax_cross_entropy(T(z), 5).item() < 1e-6

    def test_weight_linearity(self, rng):
        z = T(rng.normal(size=12))
        w = np.ones(12)
        full = ops.weighted_softmax_cross_entropy(z, 4, w).item()
        w[4] = 0.5
        assert ops.weighted_softmax_cross_entropy(z, 4, w).item() == pytest.approx(full / 2, rel=1e-15)

    def test_stable_for_huge_logits(self):
        assert math.isfinite(ops.weighted_softmax_cross_entropy(T([1e4, -1e4, 0.0]), 1).item())

    def test_errors(self):
        with pytest.raises(ValueError):
            ops.weighted_softmax_cross_entropy(T(np.zeros(3)), 3)
        with pytest.raises(ValueError):
            ops.weighted_softmax_cross_entropy(T(np.zeros(3)), 0, [1.0, -1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.data())
    def test_nonnegative_and_grad_sums_to_zero(self, logits, data):
        k = len(logits)
        target = data.draw(st.integers(0, k - 1))
        z = T(logits, requires_grad=True)
        with Tape() as tape:
            loss = ops.weighted_softmax_cross_entropy(z, target)
        assert loss.item() >= 0
        backward(tape, loss)
        assert abs(z.grad.sum()) < 1e-12


class TestBackward:
    def test_linear_vs_finite_difference(self, rng):
        x, w, b = T(rng.normal(size=3)), T(rng.normal(size=(2, 3))), T(rng.normal(size=2))
        proj = rng.normal(size=2)
        assert check_gradients(lambda: project(ops.linear(x, w, b), proj), [x, w, b]) < 1e-6

    def test_unused_parameter_gets_zero(self, rng):
        used, unused = T(rng.normal(size=(1, 4)), requires_grad=True), T(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = project(ops.log_compress(used), np.ones((1, 4)))
        g_used, g_unused = backward(tape, loss, [used, unused])
        assert np.any(g_used != 0)
        np.testing.assert_array_equal(g_unused, 0.0)

    def test_chain_rule_analytic(self):
        # d/dx log(|a x| + 1) with a = 3, x = 2 -> a / (1 + a x) = 3 / 7
        x = T([[2.0]], requires_grad=True)
        with Tape() as tape:
            y = project(ops.log_compress(ops.grouped_conv1d(x, T([[[3.0]]]))), [[1.0]])
        backward(tape, y)
        assert x.grad[0, 0] == pytest.approx(3 / 7, abs=1e-15)

    def test_gradients_accumulate_for_reused_input(self):
        x = T([[1.5]], requires_grad=True)
        with Tape() as tape:
            a = ops.log_compress(x)
            b = ops.log_compress(x)
            loss = project(ops.concat_channels([a, b]), [[1.0], [1.0]])
        backward(tape, loss)
        assert x.grad[0, 0] == pytest.approx(2 / 2.5, abs=1e-15)

    def test_reverse_order_and_consumption(self):
        x = T([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            y = ops.log_compress(x)
            loss = project(y, [[1.0, 1.0]])
        assert [r.op for r in tape.records] == ["log_compress", "project"]
        backward(tape, loss)
        with pytest.raises(RuntimeError):
            backward(tape, loss)

    def test_non_scalar_loss(self):
        x = T([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            y = ops.log_compress(x)
        with pytest.raises(ValueError):
            backward(tape, y)

    def test_no_tape_no_record(self):
        x = T([[1.0]], requires_grad=True)
        y = ops.log_compress(x)
        assert not y.requires_grad

    def test_determinism(self, rng):
        x = rng.normal(size=(2, 3, 40)).astype(np.float32)
        w = rng.normal(size=(4, 3, 5)).astype(np.float32)
        a = ops.grouped_conv1d(Tensor(x), Tensor(w), stride=2).data
        b = ops.grouped_conv1d(Tensor(x), Tensor(w), stride=2).data
        assert a.tobytes() == b.tobytes()
