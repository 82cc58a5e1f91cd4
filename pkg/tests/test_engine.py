import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from polyformer.engine import (ContractError, DimensionError, NumericError, Tensor, backward,
                               current_tape, grad_check, no_grad, ops, precision)
from polyformer.engine.rng import rng_for
from polyformer.nn import Parameter


def triple_loop_matmul(a, b):
    R, K = a.shape
    S = b.shape[1]
    out = np.zeros((R, S))
    for i in range(R):
        for j in range(S):
            for k in range(K):
                out[i, j] += a[i, k] * b[k, j]
    return out


def sliding_window_conv(x, w, stride, pad):
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for b in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = (patch * w[o]).sum()
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ops.matmul(a, b).data, [[1, 2], [3, 4]])

    def test_against_triple_loop(self):
        a = np.array([[1, 2], [3, 4]], dtype=float)
        b = np.array([[5, 6], [7, 8]], dtype=float)
        expected = triple_loop_matmul(a, b)
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_backward_rules(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        g = rng.standard_normal((3, 2)).astype(np.float32)
        backward(ops.sum(ops.mul(ops.matmul(a, b), Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(ops.softmax(Tensor([math.log(2), 0.0]), 0).data, [2 / 3, 1 / 3], rtol=1e-6)

    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(1).standard_normal((4, 6)))
        np.testing.assert_allclose(ops.softmax(x, 1).data.sum(axis=1), 1.0, atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            ops.softmax(Tensor([0.0, np.inf]), 0)

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            ops.softmax(Tensor(np.zeros((2, 2))), 2)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-80, 80)), st.integers(0, 1))
    def test_normalisation_property(self, x, axis):
        out = ops.softmax(Tensor(x), axis).data
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(2).random((2, 1, 5, 5))
        out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x.astype(np.float32))

    def test_constant_input(self):
        c = 0.75
        out = ops.conv2d(Tensor(np.full((1, 1, 6, 6), c)), Tensor(np.ones((1, 1, 3, 3))), pad=0)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(out.data, 9 * c)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_against_sliding_window(self, stride, pad):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        expected = sliding_window_conv(x, w, stride, pad)
        out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_output_size(self):
        out = ops.conv2d(Tensor(np.zeros((1, 1, 9, 7))), Tensor(np.zeros((2, 1, 3, 3))), stride=2, pad=1)
        assert out.shape == (1, 2, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        backward(ops.sum(ops.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_softmax_cross_entropy_gradient(self):
        z = np.array([0.3, -1.2, 2.0, 0.1])
        y = 2
        with precision(np.float64):
            logits = Tensor(z.reshape(1, 4, 1, 1), requires_grad=True)
            backward(ops.cross_entropy(logits, np.array([[[y]]])))
        analytic = logits.grad.reshape(4)
        p = np.exp(z - z.max())
        p /= p.sum()
        np.testing.assert_allclose(analytic, p - np.eye(4)[y], atol=1e-12)

        def ce(v):
            return -(v[y] - np.log(np.exp(v).sum()))

        eps = 1e-5
        numeric = np.array([(ce(z + eps * e) - ce(z - eps * e)) / (2 * eps) for e in np.eye(4)])
        np.testing.assert_allclose(analytic, numeric, atol=1e-4)

    def test_frozen_parameter_has_no_grad(self):
        w = Parameter((2, 2), ("ones",))
        w.data[:] = 1
        w.requires_grad = False
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        backward(ops.sum(ops.matmul(x, w)))
        assert w.grad is None
        assert x.grad is not None

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(ops.scale(x, 2.0))

    def test_empty_tape(self):
        current_tape().reset()
        loss = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(loss)

    def test_no_grad_records_nothing(self):
        current_tape().reset()
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ops.scale(x, 2.0)
        assert not y.requires_grad
        assert len(current_tape()) == 0

    def test_tape_cleared_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward(ops.sum(ops.scale(x, 2.0)))
        assert len(current_tape()) == 0

    def test_shared_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        backward(ops.sum(ops.add(ops.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [5.0])


def _point(shape, seed=0, low=-1.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, size=shape)


class TestGradCheck:
    def test_matmul_chain(self):
        rng = np.random.default_rng(4)
        b = rng.standard_normal((4, 3))
        c = rng.standard_normal((3, 2))
        with precision(np.float64):
            B, C = Tensor(b), Tensor(c)
        err = grad_check(lambda a: ops.sum(ops.matmul(ops.matmul(a, B), C)), _point((2, 4)))
        assert err <= 1e-6

    def test_conv_relu(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((2, 2, 3, 3))
        with precision(np.float64):
            W = Tensor(w)
        x0 = _point((1, 2, 5, 5), seed=6)

        def f(x):
            return ops.sum(ops.relu(ops.conv2d(x, W, pad=1)))

        # keep every pre-activation away from the kink
        pre = sliding_window_conv(x0, w, 1, 1)
        assert np.abs(pre).min() > 1e-3
        assert grad_check(f, x0) <= 1e-5

    @pytest.mark.parametrize("name,fn,shape", [
        ("exp", lambda x: ops.sum(ops.exp(x)), (3, 4)),
        ("log", lambda x: ops.sum(ops.log(ops.add_scalar(ops.mul(x, x), 1.0))), (3, 4)),
        ("gelu", lambda x: ops.sum(ops.gelu(x)), (3, 4)),
        ("softmax0", lambda x: ops.sum(ops.mul(ops.softmax(x, 0), ops.softmax(x, 0))), (4, 3)),
        ("softmax1", lambda x: ops.sum(ops.mul(ops.softmax(x, 1), ops.exp(x))), (4, 3)),
        ("log_softmax", lambda x: ops.sum(ops.mul(ops.log_softmax(x, 1), x)), (4, 3)),
        ("div", lambda x: ops.sum(ops.div(x, ops.add_scalar(ops.mul(x, x), 2.0))), (5,)),
        ("permute", lambda x: ops.sum(ops.mul(ops.permute(x, (2, 0, 1)), ops.permute(x, (2, 0, 1)))), (2, 3, 4)),
        ("concat", lambda x: ops.sum(ops.exp(ops.concat([x, ops.scale(x, 2.0)], axis=1))), (2, 3)),
        ("sum_axes", lambda x: ops.sum(ops.exp(ops.sum(x, axis=(0, 2)))), (2, 3, 4)),
        ("maxpool", lambda x: ops.sum(ops.exp(ops.maxpool2d(x, 2))), (1, 2, 4, 4)),
        ("upsample", lambda x: ops.sum(ops.exp(ops.upsample2x(x))), (1, 2, 3, 4)),
        ("gap", lambda x: ops.sum(ops.exp(ops.global_avg_pool(x))), (2, 3, 2, 2)),
        ("bce", lambda x: ops.bce_with_logits(x, np.array([0, 1, 1, 0])), (4,)),
        ("cross_entropy", lambda x: ops.cross_entropy(x, np.array([[[0, 2], [1, 1]]])), (1, 3, 2, 2)),
    ])
    def test_op(self, name, fn, shape):
        for seed in range(5):
            assert grad_check(fn, _point(shape, seed=seed)) <= 1e-4, name

    def test_batch_norm_op(self):
        rng = np.random.default_rng(7)
        with precision(np.float64):
            g = Tensor(rng.uniform(0.5, 1.5, 3))
            b = Tensor(rng.standard_normal(3))
            w = Tensor(rng.standard_normal((2, 3, 2, 2)))

        def f(x):
            out, _, _ = ops.batch_norm(x, g, b)
            return ops.sum(ops.mul(out, w))

        for seed in range(5):
            assert grad_check(f, _point((2, 3, 2, 2), seed=seed)) <= 1e-4

    def test_layer_norm_op(self):
        rng = np.random.default_rng(8)
        with precision(np.float64):
            g = Tensor(rng.uniform(0.5, 1.5, 4))
            b = Tensor(rng.standard_normal(4))
            w = Tensor(rng.standard_normal((3, 4)))
        for seed in range(5):
            assert grad_check(lambda x: ops.sum(ops.mul(ops.layer_norm(x, g, b), w)), _point((3, 4), seed=seed)) <= 1e-4


class TestDeterminism:
    def test_same_seed_same_forward(self):
        def run():
            rng = rng_for(42, "probe")
            x = Tensor(rng.standard_normal((2, 3, 8, 8)))
            w = Tensor(rng.standard_normal((4, 3, 3, 3)))
            return ops.softmax(ops.conv2d(x, w, pad=1), 1).data.tobytes()

        assert run() == run()

    def test_streams_independent_of_order(self):
        a1 = rng_for(1, "a").random(3)
        rng_for(1, "b").random(10)
        a2 = rng_for(1, "a").random(3)
        np.testing.assert_array_equal(a1, a2)
        assert not np.array_equal(rng_for(1, "a").random(3), rng_for(2, "a").random(3))

    def test_float32_default_and_float64_replay(self):
        assert Tensor([1.0]).dtype == np.float32
        with precision(np.float64):
            x = Tensor([1.0])
            assert ops.gelu(ops.scale(x, 3.0)).dtype == np.float64
