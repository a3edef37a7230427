#!/usr/bin/env python3
"""
测试自动微分算子与有限差分梯度检验
"""
import numpy as np
import pytest

from ofa_lab import autograd as ag
from ofa_lab.autograd import Graph, grad_check
from ofa_lab.errors import NonDeterministicError, NonFiniteError, ShapeMismatchError

RNG = np.random.default_rng(42)
OP_TOLERANCE = 1e-6


def _check(f, params):
    report = grad_check(f, params, epsilon=1e-5, tolerance=OP_TOLERANCE)
    assert report.passed, f"最大相对误差 {report.max_rel_error:.3e} @ {report.worst_param}"
    return report


def _target(graph, shape, seed):
    return graph.tensor(np.random.default_rng(seed).normal(size=shape))


def test_forward_values():
    """测试算子前向取值"""
    print("=== 测试算子前向 ===")
    g = Graph()
    s = ag.row_softmax(g.tensor(np.full((1, 4), 3.0)))
    np.testing.assert_allclose(s.values, [[0.25] * 4])

    a = g.tensor(RNG.normal(size=(2, 3)), requires_grad=True)
    loss = ag.mse(a, g.tensor(a.values.copy()))
    assert loss.item() == 0.0
    g.backward(loss)
    assert (a.grad == 0).all()

    assert ag.bce_with_logits(g.tensor(np.array(0.0)), 1).item() == pytest.approx(np.log(2), abs=1e-12)
    assert ag.bce_with_logits(g.tensor(np.array(2.0)), 1).item() == pytest.approx(0.126928, abs=1e-6)
    assert ag.bce_with_logits(g.tensor(np.array(50.0)), 1).item() < 1e-20
    assert np.isfinite(ag.bce_with_logits(g.tensor(np.array(-800.0)), 1).item())
    print("✅ 算子前向测试通过")


def test_grad_matmul_add():
    params = {"a": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(4, 2)), "bias": RNG.normal(size=2)}
    _check(lambda g, p: ag.mse(ag.add(ag.matmul(p["a"], p["b"]), p["bias"]), _target(g, (3, 2), 1)), params)


def test_grad_row_softmax():
    params = {"x": RNG.normal(size=(4, 5))}
    _check(lambda g, p: ag.mse(ag.row_softmax(p["x"]), _target(g, (4, 5), 2)), params)


def test_grad_layer_norm():
    params = {"x": RNG.normal(size=(3, 6)), "gamma": RNG.normal(size=6), "beta": RNG.normal(size=6)}
    _check(lambda g, p: ag.mse(ag.layer_norm(p["x"], p["gamma"], p["beta"]), _target(g, (3, 6), 3)), params)


def test_grad_gelu_scale():
    params = {"x": RNG.normal(size=(3, 3)) * 2}
    _check(lambda g, p: ag.mse(ag.scale(ag.gelu(p["x"]), 1.7), _target(g, (3, 3), 4)), params)


def test_grad_reshape_transpose_concat():
    params = {"a": RNG.normal(size=(2, 3)), "b": RNG.normal(size=(1, 3))}

    def f(g, p):
        joined = ag.concat([p["a"], p["b"]], axis=0)
        flipped = ag.transpose(joined)
        return ag.mse(ag.reshape(flipped, (9,)), _target(g, (9,), 5))

    _check(f, params)


def test_grad_getitem_mean():
    params = {"x": RNG.normal(size=(4, 4))}

    def f(g, p):
        block = ag.getitem(p["x"], (slice(1, None), slice(1, None)))
        return ag.add(ag.mse(block, _target(g, (3, 3), 6)), ag.mean(p["x"]))

    _check(f, params)


def test_grad_bce():
    for label in (0, 1):
        params = {"z": np.array([[0.3]]), "w": RNG.normal(size=(1, 1))}
        _check(lambda g, p: ag.bce_with_logits(ag.reshape(ag.matmul(p["z"], p["w"]), ()), label), params)


def test_row_softmax_shift_invariance():
    """每行加同一个常数，softmax 不变"""
    g = Graph()
    x = RNG.normal(size=(4, 6))
    shift = RNG.normal(size=(4, 1)) * 10
    base = ag.row_softmax(g.tensor(x)).values
    shifted = ag.row_softmax(g.tensor(x + shift)).values
    np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)
    np.testing.assert_allclose(base.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_backward_is_linear_over_losses():
    """两个损失之和的梯度等于各自梯度之和"""
    params = {"x": RNG.normal(size=(3, 5)), "gamma": RNG.normal(size=5), "beta": RNG.normal(size=5)}

    def first(g, p):
        return ag.mse(ag.row_softmax(p["x"]), _target(g, (3, 5), 7))

    def second(g, p):
        return ag.mse(ag.layer_norm(p["x"], p["gamma"], p["beta"]), _target(g, (3, 5), 8))

    _, grads_a = ag.analytic_gradients(first, params)
    _, grads_b = ag.analytic_gradients(second, params)
    _, grads_sum = ag.analytic_gradients(lambda g, p: ag.add(first(g, p), second(g, p)), params)
    for k in params:
        np.testing.assert_allclose(grads_sum[k], grads_a[k] + grads_b[k], rtol=0, atol=1e-12)


def test_grad_check_closed_form():
    """mse(x, 0) 的解析梯度 2x/3"""
    print("\n=== 测试梯度检验 ===")
    x = np.array([0.3, -1.2, 2.0])
    report = grad_check(lambda g, p: ag.mse(p["x"], g.tensor(np.zeros(3))), {"x": x})
    assert report.max_rel_error < 1e-9
    _, grads = ag.analytic_gradients(lambda g, p: ag.mse(p["x"], g.tensor(np.zeros(3))), {"x": x})
    np.testing.assert_allclose(grads["x"], 2 * x / 3)

    constant = grad_check(lambda g, p: ag.scale(ag.mean(g.tensor(np.ones(2))), 1.0), {"x": x})
    assert constant.max_rel_error == 0.0
    print("✅ 梯度检验测试通过")


def test_grad_check_subsamples():
    params = {"x": RNG.normal(size=(50, 50))}
    report = grad_check(lambda g, p: ag.mse(p["x"], g.tensor(np.zeros((50, 50)))), params,
                        max_coordinates=100)
    assert report.n_checked == 100 and report.n_total == 2500


def test_nondeterministic_function():
    calls = iter(range(100))
    with pytest.raises(NonDeterministicError):
        grad_check(lambda g, p: ag.scale(ag.mean(p["x"]), 1.0 + next(calls)), {"x": np.ones(2)})


def test_errors():
    g = Graph()
    with pytest.raises(ShapeMismatchError):
        ag.matmul(g.tensor(np.ones((2, 3))), g.tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError):
        ag.add(g.tensor(np.ones((2, 3))), g.tensor(np.ones(2)))
    with pytest.raises(NonFiniteError):
        ag.scale(g.tensor(np.array([1e308])), 1e10)
    other = Graph()
    with pytest.raises(ShapeMismatchError):
        ag.add(g.tensor(np.ones(2)), other.tensor(np.ones(2)))


if __name__ == "__main__":
    import sys
    print("🧪 开始自动微分测试...\n")
    sys.exit(pytest.main([__file__, "-q"]))
