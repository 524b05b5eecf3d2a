import numpy as np
import pytest

from clozefew import autodiff as ad
from clozefew.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        dn = f()
        flat[i] = orig
        gflat[i] = (up - dn) / (2 * h)
    return grad


def check_op(build, *shapes, seed=0, tol=1e-6):
    """Compare reverse-mode gradients of sum(weights * op(inputs)) against
    central finite differences for every input tensor."""
    gen = np.random.default_rng(seed)
    inputs = [Tensor(gen.standard_normal(s), requires_grad=True) for s in shapes]
    out = build(*inputs)
    weights = gen.standard_normal(out.shape)

    loss = ad.tsum(out * Tensor(weights))
    loss.backward()

    for t in inputs:
        def f(t=t):
            return float((build(*inputs).data * weights).sum())

        expected = numeric_grad(f, t.data)
        np.testing.assert_allclose(t.grad, expected, rtol=tol, atol=tol)


class TestElementwise:
    def test_add_broadcast(self):
        check_op(lambda a, b: a + b, (3, 4), (4,))

    def test_mul_broadcast(self):
        check_op(lambda a, b: a * b, (2, 3, 4), (3, 4), seed=1)

    def test_sub_neg_div(self):
        check_op(lambda a, b: (a - b) / 2.0 + (-a), (3, 3), (3, 3), seed=2)

    def test_power(self):
        check_op(lambda a: ad.power(a * a + 1.0, 1.5), (4,), seed=3)

    def test_exp_log(self):
        check_op(lambda a: ad.log(ad.exp(a) + 1.0), (5,), seed=4)

    def test_tanh_relu_gelu(self):
        check_op(lambda a: ad.tanh(a) + ad.relu(a) + ad.gelu(a), (6,), seed=5)


class TestMatmulShapes:
    def test_2d(self):
        check_op(lambda a, b: a @ b, (3, 4), (4, 2), seed=6)

    def test_batched(self):
        check_op(lambda a, b: a @ b, (2, 3, 4), (2, 4, 3), seed=7)

    def test_broadcast_weight(self):
        check_op(lambda a, b: a @ b, (2, 3, 4), (4, 5), seed=8)


class TestShapeOps:
    def test_reshape_transpose(self):
        check_op(lambda a: ad.transpose(ad.reshape(a, (2, 3, 2)), (1, 0, 2)), (4, 3), seed=9)

    def test_sum_axes(self):
        check_op(lambda a: ad.tsum(a, axis=1), (3, 4), seed=10)
        check_op(lambda a: ad.tsum(a, axis=0, keepdims=True), (3, 4), seed=11)

    def test_mean(self):
        check_op(lambda a: ad.mean(a, axis=1), (3, 4), seed=12)

    def test_stack(self):
        check_op(lambda a, b: ad.stack([a, b]), (3,), (3,), seed=13)


class TestGatherOps:
    def test_take_rows(self):
        check_op(lambda a: ad.take_rows(a, [2, 0, 2]), (4, 3), seed=14)

    def test_take_entries(self):
        check_op(lambda a: ad.take_entries(a, [0, 1, 1], [2, 0, 2]), (3, 4), seed=15)


class TestNormalizers:
    def test_softmax(self):
        check_op(lambda a: ad.softmax(a, axis=-1), (3, 5), seed=16)

    def test_log_softmax(self):
        check_op(lambda a: ad.log_softmax(a, axis=-1), (3, 5), seed=17)

    def test_layer_norm(self):
        check_op(lambda x, g, b: ad.layer_norm(x, g, b), (4, 6), (6,), (6,), seed=18)

    def test_softmax_shift_invariance(self):
        gen = np.random.default_rng(19)
        x = gen.standard_normal((4, 7))
        base = ad.softmax(Tensor(x)).data
        shifted = ad.softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        gen = np.random.default_rng(20)
        out = ad.softmax(Tensor(gen.standard_normal((5, 9)) * 30)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


class TestTape:
    def test_grad_accumulates_over_reuse(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        loss = ad.tsum(a * a + a)
        loss.backward()
        np.testing.assert_allclose(a.grad, [5.0])

    def test_no_grad_blocks_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            out = a * 2.0
        assert out._backward is None and not out.requires_grad

    def test_constant_loss_gives_zero_gradients(self):
        a = Tensor(np.ones(3), requires_grad=True)
        loss = ad.tsum(a * 0.0)
        loss.backward()
        np.testing.assert_allclose(a.grad, np.zeros(3))

    def test_diamond_graph(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        b = a * 2.0
        loss = ad.tsum(b * b + b * a)
        loss.backward()
        # d/da (4a^2 + 2a^2) = 12a
        np.testing.assert_allclose(a.grad, [36.0])
