"""测试自动微分引擎

覆盖前向算子的形状 / 数值检查、一阶梯度与有限差分的一致性，
以及梯度惩罚所需的二阶求导 (double backprop) 路径。
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.bcgan_toolkit import tensor_core as tc
from src.bcgan_toolkit.errors import NonFiniteError, SecondOrderUnsupportedError, ShapeError
from src.bcgan_toolkit.tensor_core import Graph

from tests.conftest import finite_difference, relative_error


def _grad_of(build, x0: np.ndarray) -> np.ndarray:
    """对 build(leaf) 返回的标量求 ∂/∂x。"""
    g = Graph()
    x = g.leaf(x0)
    out = build(x)
    return tc.backward(g, out)[x.node_id].values


def _value_of(build):
    return lambda x: build(tc.Tensor(x)).item()


def _check_op(build, x0, tol=1e-4):
    analytic = _grad_of(build, x0)
    numeric = finite_difference(_value_of(build), x0)
    assert relative_error(analytic, numeric) < tol


# ---------------------------------------------------------------------------
# 测试 1：张量与前向算子
# ---------------------------------------------------------------------------

class TestForwardOps:
    """前向数值与形状约束"""

    def test_scalar_is_shape_one(self):
        assert tc.Tensor(3.0).shape == (1,)

    def test_empty_tensor_rejected(self):
        with pytest.raises(ShapeError):
            tc.Tensor(np.zeros((0, 3)))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_add_broadcasts_row(self):
        out = tc.add(np.zeros((3, 2)), np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.values, [[1, 2], [1, 2], [1, 2]])

    def test_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            tc.add(np.ones((3, 2)), np.ones((2, 3)))

    def test_log_of_zero_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            tc.log(np.array([[0.0, 1.0]]))

    def test_exp_overflow_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            tc.exp(np.array([[1000.0]]))

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ValueError):
            tc.leaky_relu(np.ones((1, 1)), slope=1.5)

    def test_leaky_relu_values(self):
        out = tc.leaky_relu(np.array([[-1.0, 2.0]]), slope=0.2)
        np.testing.assert_allclose(out.values, [[-0.2, 2.0]])

    def test_softmax_rows_sum_to_one(self):
        out = tc.softmax_rows(np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_allclose(out.values.sum(axis=1), np.ones(5))

    def test_pairwise_sq_dists(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0]])
        y = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(tc.pairwise_sq_dists(x, y).values, [[1.0], [2.0]])

    def test_slice_out_of_range(self):
        with pytest.raises(ShapeError):
            tc.slice_cols(np.ones((2, 3)), 2, 5)

    def test_forward_op_dispatch(self):
        out = tc.forward_op("leaky_relu", np.array([[-1.0]]), slope=0.5)
        assert out.item() == -0.5

    def test_forward_op_unknown(self):
        with pytest.raises(ValueError):
            tc.forward_op("tanh", np.ones((1, 1)))

    def test_mixing_graphs_rejected(self):
        a = Graph().leaf(np.ones((1, 1)))
        b = Graph().leaf(np.ones((1, 1)))
        with pytest.raises(ShapeError):
            tc.add(a, b)

    def test_constants_are_not_recorded(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        tc.add(np.ones((2, 2)), np.ones((2, 2)))
        tc.square(x)
        assert len(g) == 2


# ---------------------------------------------------------------------------
# 测试 2：一阶梯度与有限差分
# ---------------------------------------------------------------------------

class TestFirstOrderGradients:
    """每个算子的 VJP 与中心差分一致"""

    @pytest.mark.parametrize("build", [
        lambda x: tc.reduce_sum(tc.square(x)),
        lambda x: tc.reduce_mean(tc.leaky_relu(x, 0.2)),
        lambda x: tc.reduce_sum(tc.sigmoid(x)),
        lambda x: tc.reduce_sum(tc.mul(tc.softmax_rows(x), np.arange(12.0).reshape(3, 4))),
        lambda x: tc.reduce_sum(tc.mul(tc.log_softmax_rows(x), np.arange(12.0).reshape(3, 4))),
        lambda x: tc.reduce_sum(tc.exp(tc.scale(x, 0.5))),
        lambda x: tc.reduce_sum(tc.log(tc.add(tc.square(x), 1.0))),
        lambda x: tc.reduce_sum(tc.sqrt(tc.add(tc.square(x), 1.0))),
        lambda x: tc.reduce_sum(tc.reciprocal(tc.add(tc.square(x), 1.0))),
        lambda x: tc.reduce_sum(tc.matmul(tc.transpose(x), x)),
        lambda x: tc.reduce_sum(tc.square(tc.reduce_sum(x, axis=1, keepdims=True))),
        lambda x: tc.reduce_sum(tc.square(tc.reduce_mean(x, axis=0))),
        lambda x: tc.reduce_sum(tc.square(tc.reshape(x, (4, 3)))),
        lambda x: tc.reduce_sum(tc.square(tc.concat_cols(x, tc.slice_cols(x, 1, 3)))),
        lambda x: tc.reduce_sum(tc.pairwise_sq_dists(x, tc.scale(x, 0.3))),
        lambda x: tc.reduce_sum(tc.square(tc.broadcast_to(tc.slice_cols(x, 0, 1), (3, 5)))),
    ])
    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_finite_difference(self, build, seed):
        _check_op(build, np.random.default_rng(seed).normal(size=(3, 4)))

    def test_broadcast_add_gradient_sums_rows(self):
        g = Graph()
        x = g.leaf(np.zeros((4, 3)))
        b = g.leaf(np.zeros((1, 3)))
        grads = tc.backward(g, tc.reduce_sum(tc.add(x, b)))
        np.testing.assert_array_equal(grads[b.node_id].values, [[4.0, 4.0, 4.0]])

    def test_untouched_leaf_gets_zero(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        unused = g.leaf(np.ones((3,)))
        grads = tc.backward(g, tc.reduce_sum(x))
        np.testing.assert_array_equal(grads[unused.node_id].values, np.zeros(3))

    def test_root_must_be_scalar(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            tc.backward(g, tc.square(x))

    def test_reused_node_accumulates(self):
        g = Graph()
        x = g.leaf(np.array([[3.0]]))
        out = tc.reduce_sum(tc.add(tc.mul(x, x), x))
        assert tc.backward(g, out)[x.node_id].item() == pytest.approx(7.0)

    def test_backward_does_not_grow_graph(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        root = tc.reduce_sum(tc.square(x))
        before = len(g)
        tc.backward(g, root)
        assert len(g) == before


# ---------------------------------------------------------------------------
# 测试 3：二阶求导
# ---------------------------------------------------------------------------

def _critic(x, w1, w2):
    """两层 leaky_relu 网络，只使用支持二阶求导的算子。"""
    return tc.reduce_sum(tc.matmul(tc.leaky_relu(tc.matmul(x, w1), 0.2), w2))


def _penalty_value(x0, w1, w2):
    g = Graph()
    x = g.leaf(x0)
    gx = tc.input_gradient_node(g, _critic(x, w1, w2), x)
    norms = tc.sqrt(tc.add(tc.reduce_sum(tc.square(gx), axis=1, keepdims=True), 1e-12))
    return tc.reduce_mean(tc.square(tc.sub(norms, 1.0)))


class TestDoubleBackprop:
    """梯度的梯度：用于 WGAN-GP 的梯度惩罚"""

    rng = np.random.default_rng(7)

    def test_input_gradient_of_linear(self):
        g = Graph()
        x = g.leaf(np.ones((2, 3)))
        w = np.array([[1.0], [2.0], [3.0]])
        gx = tc.input_gradient_node(g, tc.reduce_sum(tc.matmul(x, w)), x)
        np.testing.assert_allclose(gx.values, [[1, 2, 3], [1, 2, 3]])

    def test_penalty_gradient_wrt_weights(self):
        for _ in range(5):
            x0 = self.rng.normal(size=(4, 3))
            w1_0 = self.rng.normal(size=(3, 5))
            w2_0 = self.rng.normal(size=(5, 1))

            g = Graph()
            x = g.leaf(x0)
            w1 = g.leaf(w1_0)
            w2 = g.leaf(w2_0)
            gx = tc.input_gradient_node(g, _critic(x, w1, w2), x)
            norms = tc.sqrt(tc.add(tc.reduce_sum(tc.square(gx), axis=1, keepdims=True), 1e-12))
            penalty = tc.reduce_mean(tc.square(tc.sub(norms, 1.0)))
            grads = tc.backward(g, penalty)

            numeric_w1 = finite_difference(lambda w: _penalty_value(x0, w, w2_0).item(), w1_0)
            numeric_w2 = finite_difference(lambda w: _penalty_value(x0, w1_0, w).item(), w2_0)
            assert relative_error(grads[w1.node_id].values, numeric_w1) < 1e-4
            assert relative_error(grads[w2.node_id].values, numeric_w2) < 1e-4

    def test_penalty_gradient_wrt_input(self):
        w1_0 = self.rng.normal(size=(3, 5))
        w2_0 = self.rng.normal(size=(5, 1))
        x0 = self.rng.normal(size=(4, 3))
        g = Graph()
        x = g.leaf(x0)
        gx = tc.input_gradient_node(g, _critic(x, w1_0, w2_0), x)
        norms = tc.sqrt(tc.add(tc.reduce_sum(tc.square(gx), axis=1, keepdims=True), 1e-12))
        grads = tc.backward(g, tc.reduce_mean(tc.square(tc.sub(norms, 1.0))))
        numeric = finite_difference(lambda v: _penalty_value(v, w1_0, w2_0).item(), x0)
        # leaky_relu 分段线性：关于输入的二阶导处处为 0
        assert relative_error(grads[x.node_id].values, numeric) < 1e-4

    def test_unsupported_op_on_path(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        with pytest.raises(SecondOrderUnsupportedError):
            tc.input_gradient_node(g, tc.reduce_sum(tc.sigmoid(x)), x)

    def test_unsupported_op_off_path_is_fine(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        w = g.leaf(np.ones((2, 1)))
        gate = tc.sigmoid(w)
        out = tc.reduce_sum(tc.matmul(x, gate))
        gx = tc.input_gradient_node(g, out, x)
        assert gx.shape == (2, 2)

    def test_root_independent_of_wrt(self):
        g = Graph()
        x = g.leaf(np.ones((2, 2)))
        y = g.leaf(np.ones((2, 2)))
        gx = tc.input_gradient_node(g, tc.reduce_sum(y), x)
        np.testing.assert_array_equal(gx.values, np.zeros((2, 2)))

    def test_gradient_of_gradient_scalar(self):
        g = Graph()
        x = g.leaf(np.array([3.0]))
        gx = tc.input_gradient_node(g, tc.reduce_sum(tc.square(x)), x)
        np.testing.assert_array_equal(gx.values, [6.0])
        grads = tc.backward(g, tc.reduce_sum(tc.square(gx)))
        assert grads[x.node_id].item() == pytest.approx(24.0)


# ---------------------------------------------------------------------------
# 测试 4：Hessian 向量积
# ---------------------------------------------------------------------------

def _quadratic(x, a, b):
    """0.5·x A xᵀ + ‖x B‖²，Hessian 为 (A + Aᵀ)/2 + 2 B Bᵀ。"""
    return tc.add(tc.scale(tc.reduce_sum(tc.mul(tc.matmul(x, a), x)), 0.5),
                  tc.reduce_sum(tc.square(tc.matmul(x, b))))


def _gradient(x0, a, b) -> np.ndarray:
    g = Graph()
    x = g.leaf(x0)
    return tc.backward(g, _quadratic(x, a, b))[x.node_id].values


class TestHessianVectorProduct:
    """input_gradient_node 之后再 backward，等于有限差分的 Hessian 向量积"""

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_matches_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        x0, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))

        g = Graph()
        x = g.leaf(x0)
        gx = tc.input_gradient_node(g, _quadratic(x, a, b), x)
        hv = tc.backward(g, tc.reduce_sum(tc.mul(gx, v)))[x.node_id].values

        h = 1e-5
        numeric = (_gradient(x0 + h * v, a, b) - _gradient(x0 - h * v, a, b)) / (2 * h)
        assert relative_error(hv, numeric) < 1e-3

    def test_matches_closed_form(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
        x0, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        g = Graph()
        x = g.leaf(x0)
        gx = tc.input_gradient_node(g, _quadratic(x, a, b), x)
        hv = tc.backward(g, tc.reduce_sum(tc.mul(gx, v)))[x.node_id].values
        hessian = 0.5 * (a + a.T) + 2.0 * b @ b.T
        np.testing.assert_allclose(hv, v @ hessian, rtol=1e-10, atol=1e-12)
