"""Tensor-core correctness: every primitive against an independent oracle,
gradients against central finite differences, and graph semantics."""

import numpy as np
import pytest

from vip import tensor as T
from vip.tensor import (DimensionError, GraphError, NumericError, Tensor,
                        batch_norm, constant, conv2d, cross_entropy, gelu,
                        layer_norm, matmul, maxpool2d, pair_gather, parameter,
                        softmax_lastdim, tape)

from helpers import check_grad, finite_diff, rel_err


class TestMatmul:
    def test_identity(self):
        x = np.arange(12, dtype=np.float64).reshape(3, 4)
        out = matmul(constant(np.eye(3)), constant(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_case(self):
        a = constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = constant(np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(matmul(a, b).data, [[2.0], [4.0]])

    def test_against_scalar_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for t in range(4):
                    expected[i, j] += a[i, t] * b[t, j]
        got = matmul(constant(a), constant(b)).data
        assert rel_err(got, expected) < 1e-12

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(3, 5, 6))
        got = matmul(constant(a), constant(b)).data
        expected = np.einsum("bgik,gkj->bgij", a, b)
        assert rel_err(got, expected) < 1e-12

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        a = parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64)
        b = parameter(rng.normal(size=(4, 5)), dtype=np.float64)
        check_grad(lambda: (matmul(a, b) * matmul(a, b)).sum(),
                   {"a": a, "b": b}, rng)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = softmax_lastdim(constant(np.zeros(3)))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        out = softmax_lastdim(constant(np.array([7.3])))
        np.testing.assert_array_equal(out.data, [1.0])

    def test_against_direct_formula(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5))
        expected = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
        got = softmax_lastdim(constant(x)).data
        assert rel_err(got, expected) < 1e-12

    def test_rows_sum_to_one_and_bounded(self):
        rng = np.random.default_rng(4)
        x = rng.normal(scale=30.0, size=(10, 8))
        y = softmax_lastdim(constant(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        assert (y >= 0).all() and (y <= 1).all()

    def test_nonfinite_raises(self):
        with pytest.raises(NumericError):
            softmax_lastdim(constant(np.array([1.0, np.inf])))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x = parameter(rng.normal(size=(3, 6)), dtype=np.float64)
        w = constant(rng.normal(size=(3, 6)))
        check_grad(lambda: (softmax_lastdim(x) * w).sum(), {"x": x}, rng)


class TestLayerNorm:
    def test_constant_row_zeroed(self):
        gamma = constant(np.ones(4))
        beta = constant(np.zeros(4))
        out = layer_norm(constant(np.full((2, 4), 3.7)), gamma, beta)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_zero_gamma_yields_beta(self):
        rng = np.random.default_rng(6)
        beta = rng.normal(size=5)
        out = layer_norm(constant(rng.normal(size=(3, 5))),
                         constant(np.zeros(5)), constant(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (3, 5)))

    def test_against_per_row_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 8))
        gamma = rng.normal(size=8)
        beta = rng.normal(size=8)
        eps = 1e-6
        expected = np.empty_like(x)
        for i in range(4):
            mu = x[i].mean()
            var = ((x[i] - mu) ** 2).mean()
            expected[i] = (x[i] - mu) / np.sqrt(var + eps) * gamma + beta
        got = layer_norm(constant(x), constant(gamma), constant(beta), eps).data
        assert rel_err(got, expected) < 1e-12

    def test_normalized_statistics(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 16)) * 5 + 2
        out = layer_norm(constant(x), constant(np.ones(16)), constant(np.zeros(16)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.data.var(axis=-1) - 1).max() < 1e-4

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = parameter(rng.normal(size=(3, 7)), dtype=np.float64)
        gamma = parameter(rng.normal(size=7), dtype=np.float64)
        beta = parameter(rng.normal(size=7), dtype=np.float64)
        w = constant(rng.normal(size=(3, 7)))
        check_grad(lambda: (layer_norm(x, gamma, beta) * w).sum(),
                   {"x": x, "gamma": gamma, "beta": beta}, rng)


class TestGelu:
    def test_zero(self):
        assert gelu(constant(np.array([0.0]))).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(constant(np.array([10.0], dtype=np.float64))).data[0] - 10.0) < 1e-6

    def test_gradient_at_half(self):
        x = parameter(np.array([0.5]), dtype=np.float64)
        y = gelu(x).sum()
        y.backward()
        probe = x.data.copy()
        fd = finite_diff(lambda: float(gelu(constant(probe)).data.sum()),
                         probe, [0], h_scale=1e-6)
        assert rel_err(x.grad[0], fd[0]) < 1e-6


class TestConv2d:
    def test_pointwise_identity(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 5, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(constant(x), constant(w))
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_stem_shape(self):
        x = constant(np.zeros((1, 3, 224, 224), dtype=np.float32))
        w = constant(np.zeros((64, 3, 7, 7), dtype=np.float32))
        assert conv2d(x, w, stride=2, padding=3).shape == (1, 64, 112, 112)

    def test_against_sliding_window_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = conv2d(constant(x), constant(w), constant(b), stride=1, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    acc = b[o]
                    for c in range(2):
                        for di in range(3):
                            for dj in range(3):
                                acc += xp[0, c, i + di, j + dj] * w[o, c, di, dj]
                    expected[0, o, i, j] = acc
        assert rel_err(got, expected) < 1e-12

    def test_grouped_against_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 4, 6, 6))
        w = rng.normal(size=(4, 1, 3, 3))  # depthwise
        got = conv2d(constant(x), constant(w), stride=2, padding=1, groups=4).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 3, 3))
        for n in range(2):
            for c in range(4):
                for i in range(3):
                    for j in range(3):
                        window = xp[n, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                        expected[n, c, i, j] = (window * w[c, 0]).sum()
        assert rel_err(got, expected) < 1e-12

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d(constant(np.zeros((1, 1, 3, 3))), constant(np.zeros((1, 1, 5, 5))))

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x = parameter(rng.normal(size=(2, 4, 5, 5)), dtype=np.float64)
        w = parameter(rng.normal(size=(6, 2, 3, 3)), dtype=np.float64)
        b = parameter(rng.normal(size=6), dtype=np.float64)
        check_grad(lambda: (conv2d(x, w, b, stride=2, padding=1, groups=2) ** 2).sum(),
                   {"x": x, "w": w, "b": b}, rng)


class TestMaxPool:
    def test_constant_input(self):
        out = maxpool2d(constant(np.full((1, 2, 8, 8), 1.5)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 4, 4), 1.5))

    def test_stem_shape(self):
        out = maxpool2d(constant(np.zeros((1, 64, 112, 112), dtype=np.float32)))
        assert out.shape == (1, 64, 56, 56)

    def test_against_window_oracle(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(1, 2, 7, 7))
        got = maxpool2d(constant(x), kernel=3, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        expected = np.zeros((1, 2, 4, 4))
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    expected[0, c, i, j] = xp[0, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max()
        np.testing.assert_array_equal(got, expected)

    def test_gradient_routes_to_argmax(self):
        x = parameter(np.array([[[[1.0, 2.0], [4.0, 3.0]]]]), dtype=np.float64)
        out = maxpool2d(x, kernel=2, stride=2, padding=0)
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [[[[0.0, 0.0], [1.0, 0.0]]]])

    def test_gradients(self):
        rng = np.random.default_rng(15)
        x = parameter(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
        w = constant(rng.normal(size=(2, 3, 3, 3)))
        check_grad(lambda: (maxpool2d(x) * w).sum(), {"x": x}, rng)


class TestElementwiseAndShape:
    def test_gradients_arith(self):
        rng = np.random.default_rng(16)
        a = parameter(rng.normal(size=(3, 4)) + 3.0, dtype=np.float64)
        b = parameter(rng.normal(size=(4,)) + 3.0, dtype=np.float64)
        check_grad(lambda: ((a * b - a / b + 2.0 * b) ** 2).sum(), {"a": a, "b": b}, rng)

    def test_gradients_unary(self):
        rng = np.random.default_rng(17)
        x = parameter(rng.uniform(0.5, 2.0, size=(3, 3)), dtype=np.float64)
        check_grad(lambda: (T.exp(x) + T.log(x) + T.sqrt(x)).sum(), {"x": x}, rng)

    def test_gradients_shape_ops(self):
        rng = np.random.default_rng(18)
        x = parameter(rng.normal(size=(2, 3, 4)), dtype=np.float64)
        w = constant(rng.normal(size=(4, 3, 2)))

        def f():
            y = x.transpose(2, 1, 0) * w
            y = y.reshape(4, 6)
            y = T.concat([y, y], axis=1)
            y = T.pad(y, [(0, 1), (2, 0)])
            return (y[1:4, 2:8] ** 2).sum()

        check_grad(f, {"x": x}, rng)

    def test_gradients_reductions(self):
        rng = np.random.default_rng(19)
        x = parameter(rng.normal(size=(3, 4, 5)), dtype=np.float64)
        check_grad(lambda: (x.mean(axis=1) * x.sum(axis=(0,), keepdims=True).mean()).sum(),
                   {"x": x}, rng)

    def test_broadcast_to_gradients(self):
        rng = np.random.default_rng(20)
        x = parameter(rng.normal(size=(1, 4)), dtype=np.float64)
        w = constant(rng.normal(size=(3, 2, 4)))
        check_grad(lambda: (T.broadcast_to(x, (3, 2, 4)) * w).sum(), {"x": x}, rng)

    def test_pair_gather(self):
        rng = np.random.default_rng(21)
        x = parameter(rng.normal(size=(2, 3, 4, 9)), dtype=np.float64)
        idx = np.array([[0, 3, 8], [1, 1, 2], [4, 5, 6], [7, 0, 2]])
        got = pair_gather(x, idx).data
        for a in range(4):
            for b in range(3):
                np.testing.assert_array_equal(got[..., a, b], x.data[..., a, idx[a, b]])
        # rows with distinct indices support the vectorized scatter
        idx_unique = np.array([[0, 3, 8], [1, 5, 2], [4, 5, 6], [7, 0, 2]])
        w = constant(rng.normal(size=(2, 3, 4, 3)))
        check_grad(lambda: (pair_gather(x, idx_unique) * w).sum(), {"x": x}, rng)


class TestCrossEntropy:
    def test_against_log_softmax_oracle(self):
        rng = np.random.default_rng(22)
        logits = rng.normal(size=(5, 7))
        labels = rng.integers(0, 7, size=5)
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        expected = -np.log(probs[np.arange(5), labels]).mean()
        got = cross_entropy(constant(logits), labels).data
        assert rel_err(got, expected) < 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(23)
        logits = parameter(rng.normal(size=(4, 6)), dtype=np.float64)
        labels = rng.integers(0, 6, size=4)
        check_grad(lambda: cross_entropy(logits, labels), {"logits": logits}, rng)


class TestBatchNorm:
    def test_training_statistics_and_running_update(self):
        rng = np.random.default_rng(24)
        x = rng.normal(size=(8, 5, 4)) * 3 + 1
        gamma = constant(np.ones(4))
        beta = constant(np.zeros(4))
        rm = np.zeros(4)
        rv = np.ones(4)
        out = batch_norm(constant(x), gamma, beta, rm, rv, momentum=0.1, training=True)
        flat = out.data.reshape(-1, 4)
        assert np.abs(flat.mean(axis=0)).max() < 1e-10
        assert np.abs(flat.var(axis=0) - 1).max() < 1e-4
        np.testing.assert_allclose(rm, 0.1 * x.reshape(-1, 4).mean(axis=0))

    def test_eval_uses_running(self):
        x = np.ones((2, 3))
        rm = np.array([1.0, 1.0, 1.0])
        rv = np.array([4.0, 4.0, 4.0])
        out = batch_norm(constant(x), constant(np.ones(3)), constant(np.zeros(3)),
                         rm, rv, training=False, eps=0.0)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_gradients_training(self):
        rng = np.random.default_rng(25)
        x = parameter(rng.normal(size=(6, 4)), dtype=np.float64)
        gamma = parameter(rng.normal(size=4), dtype=np.float64)
        beta = parameter(rng.normal(size=4), dtype=np.float64)
        w = constant(rng.normal(size=(6, 4)))

        def f():
            rm = np.zeros(4)
            rv = np.ones(4)
            return (batch_norm(x, gamma, beta, rm, rv, training=True) * w).sum()

        check_grad(f, {"x": x, "gamma": gamma, "beta": beta}, rng)


class TestGraphSemantics:
    def test_sum_backward_is_ones(self):
        x = parameter(np.zeros((2, 3)), dtype=np.float64)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_off_path_leaf_has_no_grad(self):
        x = parameter(np.ones(3), dtype=np.float64)
        y = parameter(np.ones(3), dtype=np.float64)
        x.sum().backward()
        assert y.grad is None  # None is the zero gradient for untouched leaves

    def test_double_backward_rejected(self):
        x = parameter(np.ones(2), dtype=np.float64)
        loss = x.sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_nonscalar_loss_rejected(self):
        x = parameter(np.ones(2), dtype=np.float64)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_detached_loss_rejected(self):
        x = constant(np.ones(2))
        with pytest.raises(GraphError):
            (x * 2.0).sum().backward()

    def test_grad_accumulates_across_losses(self):
        x = parameter(np.ones(3), dtype=np.float64)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_tape_is_topologically_ordered(self):
        rng = np.random.default_rng(26)
        a = parameter(rng.normal(size=(3, 3)), dtype=np.float64)
        b = matmul(a, a)
        c = b + a
        d = (c * b).sum()
        order = tape(d)
        position = {id(t): i for i, t in enumerate(order)}
        for node in order:
            for parent in node._prev:
                assert position[id(parent)] < position[id(node)]

    def test_reachable_leaves_all_have_grads(self):
        rng = np.random.default_rng(27)
        leaves = {f"p{i}": parameter(rng.normal(size=(2, 2)), dtype=np.float64)
                  for i in range(4)}
        total = None
        for t in leaves.values():
            term = (t * t).sum()
            total = term if total is None else total + term
        total.backward()
        assert all(t.grad is not None for t in leaves.values())

    def test_deterministic_repetition(self):
        rng = np.random.default_rng(28)
        data = rng.normal(size=(4, 4))
        results = []
        for _ in range(2):
            x = parameter(data.copy(), dtype=np.float64)
            y = softmax_lastdim(matmul(x, x))
            loss = (y * y).sum()
            loss.backward()
            results.append((loss.data.copy(), x.grad.copy()))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])

    def test_dtype_mismatch_rejected(self):
        with pytest.raises(TypeError):
            constant(np.zeros(2, dtype=np.float32)) + constant(np.zeros(2, dtype=np.float64))
