"""
Test cases for the reverse-mode tensor library
"""
import numpy as np
import pytest

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app import tensor as T
from app.errors import NumericError, ShapeError


@pytest.fixture(name="rng")
def rng_fixture():
    return np.random.default_rng(1234)


def check_gradient(fn, x, tolerance=1e-6, step=1e-5):
    """Compare the tape gradient of a scalar fn against central differences."""
    leaf = T.Tensor(x, requires_grad=True)
    analytic = T.grad_input(fn(leaf), leaf)
    numeric = T.numerical_gradient(lambda values: fn(T.Tensor(values)).item(), x, step=step)
    assert T.max_relative_error(analytic, numeric) < tolerance


class TestOperations:
    """Forward values of the primitive operations"""

    def test_add_mul_values(self):
        """Elementwise arithmetic matches numpy"""
        a, b = T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal((a + b).numpy(), [[6.0, 8.0], [10.0, 12.0]])
        assert np.array_equal((a * b).numpy(), [[5.0, 12.0], [21.0, 32.0]])
        assert np.array_equal((a - b).numpy(), [[-4.0, -4.0], [-4.0, -4.0]])

    def test_leading_batch_broadcast(self):
        """A (D,) operand broadcasts across leading batch dimensions"""
        x = T.Tensor(np.ones((2, 3, 4)))
        bias = T.Tensor(np.arange(4.0))
        assert (x + bias).shape == (2, 3, 4)

    def test_trailing_mismatch_rejected(self):
        """Broadcasting beyond leading dimensions is a shape error"""
        with pytest.raises(ShapeError):
            T.add(T.Tensor(np.ones((3, 4))), T.Tensor(np.ones((3, 1))))

    def test_matmul_inner_mismatch(self):
        """matmul with incompatible inner extents raises ShapeError"""
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))

    def test_softmax_rows_sum_to_one(self, rng):
        """softmax is a distribution along the reduced axis"""
        out = T.softmax(T.Tensor(rng.normal(size=(5, 7)) * 10)).numpy()
        assert np.allclose(out.sum(axis=-1), 1.0)
        assert np.all(out >= 0)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(3, 6))
        assert np.allclose(T.log_softmax(T.Tensor(x)).numpy(), np.log(T.softmax(T.Tensor(x)).numpy()))

    def test_layer_norm_constant_row(self):
        """A constant row normalises to zeros, then takes beta"""
        out = T.layer_norm(T.Tensor(np.full((2, 4), 3.0)), np.ones(4), np.full(4, 0.5)).numpy()
        assert np.allclose(out, 0.5)

    def test_layer_norm_moments(self, rng):
        out = T.layer_norm(T.Tensor(rng.normal(3.0, 2.0, size=(6, 16)))).numpy()
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_gelu_known_values(self):
        out = T.gelu(T.Tensor([0.0, 100.0, -100.0])).numpy()
        assert out[0] == 0.0
        assert out[1] == pytest.approx(100.0)
        assert out[2] == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_uniform_logits(self):
        """Equal logits give loss ln K"""
        loss = T.cross_entropy(T.Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
        assert loss.item() == pytest.approx(np.log(10))

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ShapeError):
            T.Tensor(np.ones(3)).item()

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            T.narrow(T.Tensor(np.ones((2, 5))), axis=1, start=3, length=4)

    def test_max_excluding_skips_label(self):
        logits = T.Tensor([[5.0, 1.0, 3.0], [0.0, 2.0, 1.0]])
        assert np.array_equal(T.max_excluding(logits, np.array([0, 1])).numpy(), [3.0, 1.0])


class TestGradients:
    """Reverse mode against central finite differences"""

    def test_polynomial(self, rng):
        check_gradient(lambda x: T.sum_(T.square(x) * x + T.scale(x, 2.0)), rng.normal(size=(3, 4)))

    def test_matmul_chain(self, rng):
        w = rng.normal(size=(4, 5))
        check_gradient(lambda x: T.sum_(T.tanh(T.matmul(x, w))), rng.normal(size=(3, 4)))

    def test_softmax_and_log_softmax(self, rng):
        weights = rng.normal(size=(2, 6))
        check_gradient(lambda x: T.sum_(T.softmax(x) * weights), rng.normal(size=(2, 6)))
        check_gradient(lambda x: T.sum_(T.log_softmax(x) * weights), rng.normal(size=(2, 6)))

    def test_layer_norm_with_affine(self, rng):
        gamma, beta = rng.normal(size=8), rng.normal(size=8)
        target = rng.normal(size=(3, 8))
        check_gradient(lambda x: T.sum_(T.layer_norm(x, gamma, beta) * target), rng.normal(size=(3, 8)), tolerance=1e-5)

    def test_gelu(self, rng):
        check_gradient(lambda x: T.sum_(T.gelu(x)), rng.normal(size=(10,)) * 2)

    def test_shape_ops(self, rng):
        def fn(x):
            moved = T.transpose(T.reshape(x, (2, 3, 2)), (0, 2, 1))
            joined = T.concat([moved, T.narrow(moved, axis=2, start=1, length=2)], axis=2)
            return T.sum_(T.square(joined)) + T.sum_(T.mean(T.expand(x, (3, 12)), axis=0))
        check_gradient(fn, rng.normal(size=(12,)))

    def test_cross_entropy(self, rng):
        labels = np.array([1, 0, 3])
        check_gradient(lambda x: T.cross_entropy(x, labels, reduction="sum"), rng.normal(size=(3, 4)))

    def test_log_and_clip(self, rng):
        x = rng.uniform(0.2, 0.8, size=(5,))
        check_gradient(lambda t: T.sum_(T.log(T.clip(t, 0.1, 0.9))), x)

    def test_clip_blocks_gradient_outside(self):
        leaf = T.Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        grad = T.grad_input(T.sum_(T.clip(leaf, 0.0, 1.0)), leaf)
        assert np.array_equal(grad, [0.0, 1.0, 0.0])

    def test_linearity(self, rng):
        """grad(a f + b g) == a grad f + b grad g"""
        x = rng.normal(size=(4,))
        leaf = T.Tensor(x, requires_grad=True)
        f = T.sum_(T.square(leaf))
        g = T.sum_(T.tanh(leaf))
        grad_f, grad_g = T.grad_input(f, leaf), T.grad_input(g, leaf)
        combined = T.grad_input(T.scale(f, 2.0) + T.scale(g, -3.0), leaf)
        assert np.allclose(combined, 2.0 * grad_f - 3.0 * grad_g)

    def test_shared_subexpression_accumulates(self):
        """A tensor used twice receives both contributions"""
        leaf = T.Tensor([3.0], requires_grad=True)
        assert T.grad_input(T.sum_(leaf * leaf), leaf)[0] == pytest.approx(6.0)

    def test_unreached_tensor_gets_zeros(self):
        used, unused = T.Tensor([1.0, 2.0], requires_grad=True), T.Tensor([4.0], requires_grad=True)
        grads = T.gradients(T.sum_(used), [used, unused])
        assert np.array_equal(grads[1], [0.0])

    def test_deterministic(self, rng):
        x = rng.normal(size=(3, 3))
        runs = []
        for _ in range(2):
            leaf = T.Tensor(x, requires_grad=True)
            runs.append(T.grad_input(T.sum_(T.softmax(T.matmul(leaf, leaf))), leaf))
        assert np.array_equal(runs[0], runs[1])

    def test_non_scalar_loss_rejected(self):
        leaf = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.gradients(leaf * 2.0, [leaf])

    def test_ensure_finite(self):
        with pytest.raises(NumericError):
            T.ensure_finite(np.array([1.0, np.inf]), "logits")
