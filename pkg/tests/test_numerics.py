"""Autodiff engine and kernel oracles.

Every closed-form value here was computed by hand or with a calculator
and frozen as a literal, so the suite catches regressions in the kernels
rather than agreeing with them.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgpt import rng as rngmod
from tgpt.numerics import AdamW, Tensor, no_grad, use_dtype
from tgpt.numerics import gradcheck, ops


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


class TestTensorBasics:
    def test_float_arrays_take_default_dtype(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32
        with use_dtype(np.float64):
            assert Tensor([1.0, 2.0]).data.dtype == np.float64

    def test_integer_arrays_keep_their_dtype(self):
        assert Tensor(np.arange(3)).data.dtype == np.int64

    def test_backward_requires_scalar(self):
        x = t([1.0, 2.0])
        with pytest.raises(ValueError):
            (x + x).backward()

    def test_grad_accumulates_across_backward_calls(self):
        x = t([1.0, 2.0, 3.0])
        loss = ops.tsum(ops.mul(x, x))
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * first, rtol=0, atol=0)

    def test_diamond_graph_sums_both_paths(self):
        x = t([3.0])
        y = ops.add(ops.mul(x, x), x)  # x^2 + x, d/dx = 2x + 1 = 7
        ops.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [7.0], atol=1e-6)

    def test_deep_chain_does_not_recurse(self):
        x = t([1.0])
        y = x
        for _ in range(3000):
            y = ops.add(y, x)
        ops.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [3001.0], atol=0)

    def test_no_grad_detaches(self):
        x = t([1.0, 2.0])
        with no_grad():
            y = ops.mul(x, x)
        assert not y.requires_grad
        assert y._backward is None

    def test_frozen_input_gets_no_grad_buffer(self):
        x = t([1.0, 2.0], grad=False)
        w = t([3.0, 4.0])
        ops.tsum(ops.mul(x, w)).backward()
        assert x.grad is None
        np.testing.assert_allclose(w.grad, [1.0, 2.0])


class TestOpOracles:
    def test_matmul_2x2(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        b = t([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_allclose(ops.matmul(a, b).data,
                                   [[19.0, 22.0], [43.0, 50.0]], atol=0)

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ops.ShapeError):
            ops.matmul(t(np.ones((2, 3))), t(np.ones((4, 2))))

    def test_matmul_grads(self):
        a = t([[1.0, 2.0]])
        b = t([[3.0], [4.0]])
        ops.tsum(ops.matmul(a, b)).backward()
        np.testing.assert_allclose(a.grad, [[3.0, 4.0]], atol=0)
        np.testing.assert_allclose(b.grad, [[1.0], [2.0]], atol=0)

    def test_softmax_uniform(self):
        s = ops.softmax(t([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(s.data, [[0.25] * 4], atol=1e-7)

    def test_softmax_rejects_nonfinite(self):
        with pytest.raises(ops.NonFiniteError):
            ops.softmax(t([[np.inf, 0.0]]))

    def test_layer_norm_oracle(self):
        x = t([[1.0, 2.0, 3.0]])
        out = ops.layer_norm(x, t(np.ones(3)), t(np.zeros(3)), 0.0)
        np.testing.assert_allclose(out.data, [[-1.224744871, 0.0, 1.224744871]],
                                   atol=1e-6)

    def test_gelu_oracle(self):
        out = ops.gelu(t([1.0, -1.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.841344746, -0.158655254, 0.0],
                                   atol=1e-6)

    def test_l2_normalize_oracle(self):
        out = ops.l2_normalize(t([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-7)

    def test_cross_entropy_oracle(self):
        # ln(e^2 + 2) - 2, frozen from a hand calculation
        loss = ops.cross_entropy_logits(t([[2.0, 0.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(0.2395447662, abs=1e-6)

    def test_cross_entropy_masked_mean(self):
        logits = t(np.zeros((2, 4)))
        full = ops.cross_entropy_logits(logits, np.array([1, 2]))
        half = ops.cross_entropy_logits(logits, np.array([1, 2]),
                                        mask=np.array([1.0, 0.0]))
        assert full.item() == pytest.approx(np.log(4.0), abs=1e-6)
        assert half.item() == pytest.approx(np.log(4.0), abs=1e-6)

    def test_cross_entropy_empty_mask_is_zero_with_zero_grads(self):
        logits = t(np.ones((2, 3)))
        loss = ops.cross_entropy_logits(logits, np.array([0, 1]),
                                        mask=np.zeros(2))
        assert loss.item() == 0.0
        loss.backward()
        np.testing.assert_array_equal(logits.grad, np.zeros((2, 3)))

    def test_embedding_range_check(self):
        table = t(np.zeros((4, 2)))
        with pytest.raises(ops.ShapeError):
            ops.embedding(table, np.array([4]))

    def test_embedding_grad_scatters(self):
        table = t(np.zeros((4, 2)))
        out = ops.embedding(table, np.array([1, 1, 3]))
        ops.tsum(out).backward()
        np.testing.assert_allclose(table.grad,
                                   [[0, 0], [2, 2], [0, 0], [1, 1]], atol=0)

    def test_attention_with_tied_scores_averages_values(self):
        rng = rngmod.stream(5, "test/attn")
        q = t(np.ones((1, 2, 4)))
        k = t(np.zeros((1, 3, 4)))  # all scores tie -> uniform weights
        v = t(rng.normal(0, 1, (1, 3, 4)))
        out = ops.attention(q, k, v, n_heads=2)
        expected = np.broadcast_to(v.data.mean(axis=1, keepdims=True), (1, 2, 4))
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_attention_mask_excludes_positions(self):
        rng = rngmod.stream(5, "test/attn")
        q = t(rng.normal(0, 1, (1, 1, 4)))
        kv = t(rng.normal(0, 1, (1, 3, 4)))
        only_first = ops.attention(q, kv, kv, n_heads=1,
                                   key_mask=np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(only_first.data, kv.data[:, :1, :], atol=1e-5)


class TestBroadcastProperties:
    @given(rows=st.integers(1, 5), cols=st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_broadcast_add_grad_shapes(self, rows, cols):
        a = t(np.ones((rows, cols)))
        b = t(np.ones((1, cols)))
        ops.tsum(ops.add(a, b)).backward()
        assert a.grad.shape == (rows, cols)
        assert b.grad.shape == (1, cols)
        np.testing.assert_allclose(b.grad, np.full((1, cols), rows), atol=0)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_softmax_rows_sum_to_one(self, values):
        s = ops.softmax(t([values]))
        assert s.data.sum() == pytest.approx(1.0, abs=1e-5)
        assert (s.data >= 0).all()


class TestAdamW:
    def test_single_step_oracle(self):
        p = t([1.0])
        opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        # m_hat = 1, v_hat = 1 -> p = 1 - 0.1/(1 + 1e-8)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decay_is_decoupled(self):
        p = t([2.0])
        lr, wd = 0.1, 0.5
        opt = AdamW({"p": p}, lr=lr, weight_decay=wd)
        expected = np.float32(2.0)
        for _ in range(3):
            p.grad = np.zeros(1, dtype=np.float32)
            opt.step()
            expected = expected * (1.0 - lr * wd)
        assert p.data[0] == pytest.approx(float(expected), rel=1e-6)

    def test_skips_params_without_grads(self):
        p, q = t([1.0]), t([1.0])
        opt = AdamW({"p": p, "q": q}, lr=0.1)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert q.data[0] == 1.0
        assert p.data[0] != 1.0

    def test_zero_grad_clears(self):
        p = t([1.0])
        opt = AdamW({"p": p})
        p.grad = np.ones(1, dtype=np.float32)
        opt.zero_grad()
        assert p.grad is None

    def test_two_steps_match_manual_recurrence(self):
        p64 = np.float64(1.0)
        m = v = 0.0
        lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
        grads = [0.5, -0.25]
        for step, g in enumerate(grads, start=1):
            p64 *= 1.0 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**step)
            vh = v / (1 - b2**step)
            p64 -= lr * mh / (np.sqrt(vh) + eps)
        p = t([1.0])
        opt = AdamW({"p": p}, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        for g in grads:
            p.grad = np.full(1, g, dtype=np.float32)
            opt.step()
        assert p.data[0] == pytest.approx(p64, rel=1e-5)


class TestGradcheck:
    def test_linear_cross_entropy_example(self):
        rng = rngmod.stream(21, "test/gradcheck")
        with use_dtype(np.float64):
            w = Tensor(rng.normal(0, 1, (5, 3)), requires_grad=True)
            x = rng.normal(0, 1, (4, 5))
            y = np.array([0, 1, 2, 1])

            def loss():
                return ops.cross_entropy_logits(ops.matmul(Tensor(x), w), y)

            report = gradcheck.check(loss, {"w": w}, tolerance=1e-6)
        assert report.passed, report.lines()

    def test_all_kernels_pass(self):
        report = gradcheck.check_kernels()
        assert len(report.entries) == 18
        assert report.passed, "\n".join(report.lines())

    def test_corrupted_backward_is_named(self):
        with ops.corrupt_backward("softmax"):
            report = gradcheck.check_kernels(only={"softmax", "gelu"})
        failed = {e.name for e in report.failures()}
        assert failed == {"softmax"}

    def test_report_lines_are_per_kernel(self):
        report = gradcheck.check_kernels(only={"add"})
        assert len(report.entries) == 1
        assert report.entries[0].name == "add"
        assert "ok" in report.entries[0].line()


class TestRngStreams:
    def test_same_tag_reproduces(self):
        a = rngmod.stream(7, "x/y").normal(0, 1, 8)
        b = rngmod.stream(7, "x/y").normal(0, 1, 8)
        np.testing.assert_array_equal(a, b)

    def test_different_tags_decorrelate(self):
        a = rngmod.stream(7, "x/y").normal(0, 1, 8)
        b = rngmod.stream(7, "x/z").normal(0, 1, 8)
        assert not np.array_equal(a, b)

    def test_different_seeds_decorrelate(self):
        a = rngmod.stream(7, "x").normal(0, 1, 8)
        b = rngmod.stream(8, "x").normal(0, 1, 8)
        assert not np.array_equal(a, b)
