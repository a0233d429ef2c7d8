import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptmda import autodiff as ad
from ptmda.autodiff import OptimizerState, Tensor, backward, grad_check, sgd_step


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestPrimitives:
    def test_matmul(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_apply_primitive_dispatch(self):
        out = ad.apply_primitive("matmul", Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.item() == 11.0
        with pytest.raises(ValueError):
            ad.apply_primitive("conv2d", Tensor([1.0]))

    def test_shape_errors(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_bias_broadcast(self):
        x, b = leaf(np.ones((4, 3))), leaf([1.0, 2.0, 3.0])
        backward(ad.sum(x + b))
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_log_guard(self):
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([0.0, 1.0]))

    def test_div_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_float32_stays_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = 2.0 * x + 1.0
        assert y.dtype == np.float32
        backward(ad.sum(y))
        assert x.grad.dtype == np.float32

    def test_take_rows_repeated_indices(self):
        x = leaf(np.arange(6.0).reshape(3, 2))
        backward(ad.sum(x[np.array([0, 0, 2])]))
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


class TestBackward:
    def test_square(self):
        x = leaf([3.0])
        backward(ad.sum(x * x))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_mean(self):
        x = leaf([1.0, 2.0, 3.0, 4.0])
        backward(ad.mean(x))
        np.testing.assert_array_equal(x.grad, [0.25] * 4)

    def test_log_softmax_label_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=5)
        label = 2

        def f(v):
            return math.log(math.exp(v[label]) / np.exp(v).sum())

        x = leaf(x0.copy())
        backward(ad.sum(ad.log(ad.softmax(x)) * Tensor(np.eye(5)[label])))
        eps = 1e-5
        for k in range(5):
            e = np.zeros(5)
            e[k] = eps
            num = (f(x0 + e) - f(x0 - e)) / (2 * eps)
            assert abs(x.grad[k] - num) <= 1e-6 * max(1.0, abs(num))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ad.ShapeError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_loss_outside_graph_rejected(self):
        with pytest.raises(ValueError):
            backward(Tensor(1.0))

    def test_independent_leaf_gets_zero(self):
        x, y = leaf([1.0, 2.0]), leaf([5.0])
        gx, gy = backward(ad.sum(x * x), [x, y])
        np.testing.assert_array_equal(gy, [0.0])
        assert y.grad is None

    def test_accumulation_over_paths(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 2))

        def f(x):
            return ad.sum(ad.exp(x) * x)

        x1 = leaf(x0)
        (g1,) = backward(f(x1), [x1])
        x2 = leaf(x0)
        (g2,) = backward(f(x2) + f(x2), [x2])
        np.testing.assert_allclose(g2, 2 * g1, rtol=0, atol=1e-14)

    def test_graph_order_is_topological(self):
        x = leaf([1.0])
        y = ad.exp(x)
        z = y * x
        g = ad.Graph.from_root(ad.sum(z))
        pos = {id(n): i for i, n in enumerate(g.nodes)}
        for n in g.nodes:
            for inp in n._inputs:
                assert pos[id(inp)] < pos[id(n)]


class TestGradCheck:
    def test_polynomial(self):
        assert grad_check(lambda x: ad.sum(x * x), [leaf([3.0])], eps=1e-5) <= 1e-8

    def test_softmax_cross_entropy(self):
        from ptmda.losses import cross_entropy

        rng = np.random.default_rng(1)
        W, X = leaf(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 4)))
        y = rng.integers(0, 3, 5)
        assert grad_check(lambda w: cross_entropy(X @ w, y), [W]) <= 1e-4

    def test_non_finite_rejected(self):
        with pytest.raises(FloatingPointError):
            grad_check(lambda x: ad.scale(ad.sum(x), np.inf), [leaf([1.0])])

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("exp", lambda x: ad.sum(ad.exp(x))),
            ("sigmoid", lambda x: ad.sum(ad.sigmoid(x) * ad.sigmoid(x))),
            ("softmax", lambda x: ad.sum(ad.softmax(x) * Tensor(np.arange(12.0).reshape(3, 4)))),
            ("log", lambda x: ad.sum(ad.log(ad.exp(x) + 1.0))),
            ("div", lambda x: ad.sum(ad.div(x, ad.exp(x)))),
            ("pairwise", lambda x: ad.sum(ad.pairwise_sqdist(x) * Tensor(np.arange(9.0).reshape(3, 3)))),
            ("lse", lambda x: ad.masked_logsumexp(x, np.arange(12).reshape(3, 4) % 3 == 0)),
            ("outer", lambda x: ad.sum(ad.batch_outer(x, ad.exp(x)) * Tensor(np.arange(48.0).reshape(3, 16)))),
            ("standardize", lambda x: ad.sum(ad.standardize(x, 1e-5)[0] * Tensor(np.arange(12.0).reshape(3, 4)))),
            ("concat", lambda x: ad.sum(ad.concat([x, ad.exp(x)]) * Tensor(np.arange(24.0).reshape(6, 4)))),
            ("relu", lambda x: ad.sum(ad.relu(x) * x)),
        ],
    )
    def test_primitives_pass_grad_check(self, name, fn):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(20):
            x = leaf(rng.normal(size=(3, 4)))
            assert grad_check(fn, [x]) <= 1e-4, name


class TestGRLPrimitive:
    def test_identity_forward_negated_backward(self):
        x = leaf([1.0, 2.0])
        y = ad.grl(x, 1.0)
        np.testing.assert_array_equal(y.data, [1.0, 2.0])
        backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_zero_coeff(self):
        x = leaf([1.0, 2.0])
        backward(ad.sum(ad.grl(x, 0.0)) + ad.sum(ad.scale(x, 0.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    @given(st.floats(0, 5), st.floats(0, 5))
    @settings(max_examples=30, deadline=None)
    def test_double_reversal_factor(self, a, b):
        x = leaf([1.0, -2.0])
        (g,) = backward(ad.sum(ad.grl(ad.grl(x, a), b)), [x])
        np.testing.assert_allclose(g, [a * b, a * b])


class TestSGD:
    def step(self, p, g, lr, momentum, wd, state=None):
        param = Tensor(np.array([p]), requires_grad=True)
        state = state or OptimizerState(lr=lr, momentum=momentum, weight_decay=wd)
        sgd_step([param], [np.array([g])], state)
        return param, state

    def test_plain_descent(self):
        p, _ = self.step(1.0, 1.0, 0.1, 0.0, 0.0)
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_weight_decay(self):
        # 1 - 0.1 * (1 + 5e-4 * 1)
        p, _ = self.step(1.0, 1.0, 0.1, 0.0, 5e-4)
        assert p.data[0] == pytest.approx(0.89995, abs=1e-15)

    def test_momentum_two_steps(self):
        param = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.9)
        sgd_step([param], [np.array([1.0])], state)
        sgd_step([param], [np.array([1.0])], state)
        # v1 = 1, v2 = 1.9; p = 1 - 0.1 - 0.19
        assert param.data[0] == pytest.approx(0.71, abs=1e-14)
        assert state.velocity[0].shape == param.shape

    def test_zero_lr_is_identity(self):
        rng = np.random.default_rng(3)
        params = [Tensor(rng.normal(size=(3, 2)), requires_grad=True) for _ in range(3)]
        before = [p.data.copy() for p in params]
        sgd_step(params, [rng.normal(size=(3, 2)) for _ in params], OptimizerState(lr=0.0, momentum=0.9, weight_decay=5e-4))
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p.data, b)

    def test_non_finite_aborts_without_update(self):
        a = Tensor(np.array([1.0]), requires_grad=True, name="good")
        b = Tensor(np.array([1.0]), requires_grad=True, name="bad")
        with pytest.raises(ad.NonFiniteGradientError, match="bad"):
            sgd_step([a, b], [np.array([1.0]), np.array([np.nan])], OptimizerState(lr=0.1))
        assert a.data[0] == 1.0

    def test_missing_grad_leaves_param_untouched(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        sgd_step([a], [None], OptimizerState(lr=0.1, weight_decay=0.1))
        assert a.data[0] == 1.0
