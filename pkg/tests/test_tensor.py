import numpy as np
import pytest

import densecount as dc
from densecount import tensor as T
from densecount.errors import ContractError, NumericError, ShapeError


class TestCreation:
    def test_zeros_fill(self):
        t = dc.zeros([2, 3])
        assert t.shape == (2, 3)
        assert np.all(t.values == 0.0)

    def test_constant_fill(self):
        t = dc.constant([4], 1.5)
        assert t.values.tolist() == [1.5, 1.5, 1.5, 1.5]

    def test_gaussian_sample_std_matches_request(self):
        t = dc.gaussian([10000], mean=0.0, std=0.01, seed=7)
        assert 0.008 <= t.values.std() <= 0.012

    def test_gaussian_reproducible(self):
        a = dc.gaussian([50], 0.0, 1.0, seed=3)
        b = dc.gaussian([50], 0.0, 1.0, seed=3)
        assert np.array_equal(a.values, b.values)

    @pytest.mark.parametrize("shape", [[0], [2, 0], [-1], [2, -3]])
    def test_invalid_extents_rejected(self, shape):
        with pytest.raises(ShapeError):
            dc.zeros(shape)

    def test_tensor_create_dispatch(self):
        assert np.all(dc.tensor_create([2], "constant", value=2.0).values == 2.0)
        assert np.all(dc.tensor_create([2], "zeros").values == 0.0)
        g = dc.tensor_create([5], "gaussian", mean=1.0, std=0.5, seed=1)
        assert g.shape == (5,)

    def test_non_finite_values_rejected(self):
        with pytest.raises(NumericError):
            dc.Tensor(np.array([1.0, np.inf]))
        with pytest.raises(NumericError):
            dc.Tensor(np.array([np.nan]))


class TestSum:
    def test_sum_matrix(self):
        assert T.sum_all(dc.Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0

    def test_sum_zeros(self):
        assert T.sum_all(dc.zeros([5, 5])).item() == 0.0

    def test_sum_gradient_is_ones(self):
        t = dc.Tensor(np.arange(6.0).reshape(2, 3))
        g = dc.Graph()
        with g:
            loss = T.sum_all(t)
        dc.backward(loss, g)
        assert np.array_equal(t.grad, np.ones((2, 3)))

    def test_sum_bit_identical_across_calls(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, (37, 21)))
        first = T.sum_all(t).item()
        for _ in range(5):
            assert T.sum_all(t).item() == first


class TestBackward:
    def test_square_sum_gradient(self):
        w = dc.Tensor([2.0, 3.0])
        g = dc.Graph()
        with g:
            loss = T.sum_all(T.mul(w, w))
        dc.backward(loss, g)
        assert np.allclose(w.grad, [4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        t = dc.Tensor([1.0, 2.0])
        g = dc.Graph()
        with g:
            out = T.mul(t, t)
        with pytest.raises(ContractError):
            dc.backward(out, g)

    def test_visits_every_record_once(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, 4))
        g = dc.Graph()
        with g:
            a = T.mul(t, t)
            b = T.add(a, t)
            unused = T.relu(t)  # recorded but off the loss path
            loss = T.sum_all(b)
        assert dc.backward(loss, g) == len(g) == 4

    def test_unreachable_tensor_keeps_grad_absent(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, 4))
        other = dc.Tensor(rng.uniform(-1, 1, 4))
        g = dc.Graph()
        with g:
            side = T.relu(other)
            loss = T.sum_all(t)
        dc.backward(loss, g)
        assert other.grad is None and side.grad is None
        assert t.grad is not None

    def test_grads_accumulate_until_cleared(self):
        t = dc.Tensor([1.0, 2.0])
        for expected in (1.0, 2.0):
            g = dc.Graph()
            with g:
                loss = T.sum_all(t)
            dc.backward(loss, g)
            assert np.all(t.grad == expected)
        t.clear_grad()
        assert t.grad is None

    def test_broadcast_mul_reduces_gradient(self, rng):
        x = dc.Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
        gate = dc.Tensor(rng.uniform(0.1, 0.9, (2, 3, 1, 1)))
        g = dc.Graph()
        with g:
            loss = T.sum_all(T.mul(x, gate))
        dc.backward(loss, g)
        assert gate.grad.shape == (2, 3, 1, 1)
        assert np.allclose(gate.grad, x.values.sum(axis=(2, 3), keepdims=True))


class TestFiniteDiff:
    def test_matches_analytic_square(self):
        t = dc.Tensor([1.0, 2.0])
        num = dc.finite_diff_grad(lambda u: float((u.values ** 2).sum()), t, eps=1e-5)
        assert np.allclose(num.values, [2.0, 4.0], atol=1e-8)

    def test_sum_gives_ones(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, (3, 2)))
        num = dc.finite_diff_grad(lambda u: T.sum_all(u), t, eps=1e-5)
        assert np.allclose(num.values, 1.0, atol=1e-9)

    def test_constant_gives_zeros(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, 5))
        num = dc.finite_diff_grad(lambda u: 3.25, t, eps=1e-5)
        assert np.allclose(num.values, 0.0, atol=1e-9)

    def test_restores_input(self, rng):
        t = dc.Tensor(rng.uniform(-1, 1, 5))
        before = t.values.copy()
        dc.finite_diff_grad(lambda u: float(u.values.sum()), t)
        assert np.array_equal(t.values, before)

    def test_rejects_bad_eps(self):
        with pytest.raises(ContractError):
            dc.finite_diff_grad(lambda u: 0.0, dc.zeros([2]), eps=0.0)


def test_elementwise_ops_gradcheck(rng):
    from conftest import gradcheck
    a = dc.Tensor(rng.uniform(-1, 1, (3, 4)))
    b = dc.Tensor(rng.uniform(-1, 1, (3, 4)))
    coef = rng.uniform(-1, 1, (3, 4))
    for op in (T.add, T.sub, T.mul):
        errs = gradcheck(lambda a, b, _op=op: _op(a, b), {"a": a, "b": b}, coef)
        assert max(errs.values()) < 1e-8

    m = dc.Tensor(rng.uniform(-1, 1, (3, 5)))
    n = dc.Tensor(rng.uniform(-1, 1, (5, 2)))
    errs = gradcheck(T.matmul, {"a": m, "b": n}, rng.uniform(-1, 1, (3, 2)))
    assert max(errs.values()) < 1e-8

    x = dc.Tensor(rng.uniform(-1, 1, (4, 4)) + 0.05)  # keep clear of the relu kink
    for op in (T.relu, T.sigmoid):
        errs = gradcheck(lambda t, _op=op: _op(t), {"t": x}, rng.uniform(-1, 1, (4, 4)))
        assert errs["t"] < 1e-7
