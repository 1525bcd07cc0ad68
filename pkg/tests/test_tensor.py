"""Tensor engine: op semantics, broadcasting gradients, softmax properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plugrank import nn
from plugrank.nn import tensor as T
from plugrank.errors import ShapeError


def rand(*shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


class TestForward:
    def test_add_matches_numpy(self):
        a, b = rand(3, 4, seed=1), rand(3, 4, seed=2)
        assert np.allclose((nn.Tensor(a) + nn.Tensor(b)).data, a + b)

    def test_broadcast_add_bias(self):
        a, b = rand(3, 4, seed=1), rand(4, seed=2)
        assert np.allclose((nn.Tensor(a) + nn.Tensor(b)).data, a + b)

    def test_matmul_batched(self):
        a, b = rand(2, 3, 4, 5, seed=1), rand(2, 3, 5, 6, seed=2)
        assert np.allclose(nn.matmul(nn.Tensor(a), nn.Tensor(b)).data, a @ b)

    def test_matmul_shape_mismatch_message(self):
        with pytest.raises(ShapeError, match="inner dims"):
            nn.matmul(nn.Tensor(rand(2, 3)), nn.Tensor(rand(4, 5)))

    def test_concat_and_narrow_roundtrip(self):
        a, b = rand(2, 3, seed=1), rand(2, 5, seed=2)
        cat = nn.concat([nn.Tensor(a), nn.Tensor(b)], axis=1)
        assert np.allclose(nn.narrow(cat, 1, 3, 5).data, b)

    def test_default_dtype_is_single(self):
        assert nn.Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_use_dtype_switches_creation(self):
        with nn.use_dtype(np.float64):
            assert nn.Tensor([1, 2]).data.dtype == np.float64
        assert nn.Tensor([1, 2]).data.dtype == np.float32

    def test_forward_deterministic_bitwise(self):
        x = rand(4, 6, seed=3, dtype=np.float32)
        pset = nn.ParamSet()
        lin = nn.Linear(pset, "l", 6, 5, seed=9)
        out1 = lin(nn.Tensor(x)).data.tobytes()
        out2 = lin(nn.Tensor(x)).data.tobytes()
        assert out1 == out2


class TestBackward:
    def test_grad_accumulates_over_reuse(self):
        x = nn.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = (x * x + x).sum()
        y.backward()
        assert np.allclose(x.grad, 2 * x.data + 1)

    def test_broadcast_grad_sums(self):
        b = nn.Tensor(rand(4, seed=1), requires_grad=True)
        out = (nn.Tensor(rand(3, 4, seed=2)) + b).sum()
        out.backward()
        assert np.allclose(b.grad, np.full(4, 3.0))

    def test_no_grad_blocks_graph(self):
        x = nn.Tensor(rand(3, seed=1), requires_grad=True)
        with nn.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad

    @pytest.mark.parametrize("op,ref_grad", [
        (nn.relu, lambda x: (x > 0).astype(float)),
        (nn.sigmoid, lambda x: 1 / (1 + np.exp(-x)) * (1 - 1 / (1 + np.exp(-x)))),
        (nn.tanh, lambda x: 1 - np.tanh(x) ** 2),
        (nn.exp, lambda x: np.exp(x)),
    ])
    def test_unary_gradients(self, op, ref_grad):
        x = nn.Tensor(rand(5, seed=4) + 0.3, requires_grad=True)
        op(x).sum().backward()
        assert np.allclose(x.grad, ref_grad(x.data), atol=1e-12)

    def test_clip_gradient_masks_clamped(self):
        x = nn.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        nn.clip(x, 0.0, 1.0).sum().backward()
        assert np.allclose(x.grad, [0.0, 1.0, 0.0])

    def test_gather_rows_accumulates_repeats(self):
        table = nn.Tensor(np.zeros((4, 2)), requires_grad=True)
        out = nn.gather_rows(table, np.array([1, 1, 3]))
        out.backward(np.ones((3, 2)))
        expected = np.zeros((4, 2))
        expected[1] = 2
        expected[3] = 1
        assert np.allclose(table.grad, expected)

    def test_gather_rows_large_batch_bincount_path(self):
        rng = np.random.default_rng(0)
        table = nn.Tensor(rng.normal(size=(16, 3)), requires_grad=True)
        idx = rng.integers(0, 16, size=(40, 50))
        g = rng.normal(size=(40, 50, 3))
        nn.gather_rows(table, idx).backward(g)
        expected = np.zeros((16, 3))
        np.add.at(expected, idx, g)
        assert np.allclose(table.grad, expected, atol=1e-10)


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.floats(-20, 20))
    def test_rows_sum_to_one_and_shift_invariant(self, logits, shift):
        x = np.array(logits, dtype=np.float64)
        s1 = nn.softmax(nn.Tensor(x.reshape(1, -1))).data
        assert s1.min() >= 0
        assert abs(s1.sum() - 1.0) <= 1e-6
        s2 = nn.softmax(nn.Tensor((x + shift).reshape(1, -1))).data
        assert np.abs(s1 - s2).max() <= 1e-6

    def test_gradient_matches_finite_difference(self):
        x = nn.Tensor(rand(6, seed=5).reshape(1, 6))
        w = nn.Tensor(rand(6, seed=6).reshape(1, 6))
        err = nn.grad_check(lambda t: (nn.softmax(t) * w).sum(), x, h=1e-6)
        assert err < 1e-8

    def test_cross_entropy_uniform_is_log_k(self):
        logits = nn.Tensor(np.zeros((5, 7)))
        loss = nn.cross_entropy_logits(logits, np.arange(5))
        assert abs(float(loss.data) - np.log(7)) < 1e-6

    def test_logsumexp_stable_for_large_logits(self):
        x = nn.Tensor(np.array([[1000.0, 1000.0]]))
        out = nn.logsumexp(x, axis=1)
        assert np.allclose(out.data, 1000.0 + np.log(2.0))


class TestGradCheckOp:
    def test_linear_function_exact(self):
        point = nn.Tensor(rand(10, seed=7))
        err = nn.grad_check(lambda x: x.sum(), point, h=1e-5)
        assert err <= 1e-10

    def test_rejects_non_finite(self):
        point = nn.Tensor(np.array([0.0]))
        with pytest.raises(Exception, match="non-finite"):
            nn.grad_check(lambda x: nn.log(x).sum(), point, h=1e-5)

    def test_bind_params_roundtrip(self):
        pset = nn.ParamSet()
        lin = nn.Linear(pset, "l", 3, 2, seed=0)
        params = list(pset)
        before = [p.tensor for p in params]
        vec = nn.Tensor(nn.pack_params(params))
        with nn.bind_params(params, vec):
            assert params[0].tensor is not before[0]
        assert all(p.tensor is t for p, t in zip(params, before))
