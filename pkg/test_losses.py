#!/usr/bin/env python3
"""
测试 OFA 损失、分类损失、组合损失与层预设
"""
import numpy as np
import pytest

from ofa_lab import autograd as ag
from ofa_lab.autograd import Graph
from ofa_lab.errors import BadConfigError, BadLayerError, EmptySelectionError, SizeMismatchError
from ofa_lab.loss_service import (
    check_breakdown, classification_loss, compute_sample_loss, final_loss,
    ofa_loss, resolve_layer_preset,
)
from ofa_lab.opam_service import Opam, OpamTarget, build_opam, softmax_target
from ofa_lab.phantom_service import synthesize
from ofa_lab.schemas import PhantomConfig, VitConfig
from ofa_lab.vit_model import bind, init_params
from ofa_lab.volume_service import partition


def _attention_with_block(block: np.ndarray, cls_value=0.123) -> np.ndarray:
    n = block.shape[0]
    a = np.full((n + 1, n + 1), cls_value)
    a[1:, 1:] = block
    return a


def test_ofa_loss_fixed_point():
    """注意力 patch 子块等于 M' 时损失为 0"""
    print("=== 测试 OFA 损失 ===")
    t = np.array([[0.6, 0.4], [0.3, 0.7]])
    g = Graph()
    loss = ofa_loss(g.tensor(_attention_with_block(t, cls_value=0.9)), OpamTarget(n=2, t=t))
    assert loss.item() < 1e-12
    print("✅ OFA 不动点测试通过")


def test_ofa_loss_hand_case():
    target = softmax_target(Opam(n=2, m=np.zeros((2, 2))))
    np.testing.assert_allclose(target.t, 0.5)
    block = np.array([[0.7311, 0.2689], [0.5, 0.5]])
    loss = ofa_loss(Graph().tensor(_attention_with_block(block)), target)
    assert loss.item() == pytest.approx(0.026703, abs=1e-6)


def test_ofa_loss_single_patch():
    target = OpamTarget(n=1, t=np.ones((1, 1)))
    loss = ofa_loss(Graph().tensor(np.array([[0.4, 0.6], [0.2, 0.8]])), target)
    assert loss.item() == pytest.approx((1 - 0.8) ** 2)


def test_ofa_loss_size_mismatch():
    with pytest.raises(SizeMismatchError):
        ofa_loss(Graph().tensor(np.eye(4)), OpamTarget(n=2, t=np.eye(2)))


def test_classification_loss():
    g = Graph()
    assert classification_loss(g.tensor(np.array(0.0)), 1).item() == pytest.approx(0.693147, abs=1e-6)
    assert classification_loss(g.tensor(np.array(2.0)), 1).item() == pytest.approx(0.126928, abs=1e-6)
    assert classification_loss(g.tensor(np.array(50.0)), 1).item() < 1e-20


def test_final_loss():
    print("\n=== 测试组合损失 ===")
    g = Graph()
    l_cls = g.tensor(np.array(0.5))
    total, breakdown = final_loss(l_cls, {}, 0.0)
    assert total.item() == 0.5 and breakdown.l_final == breakdown.l_classification

    total, breakdown = final_loss(l_cls, {0: g.tensor(np.array(0.001))}, 1000.0)
    assert breakdown.l_final == pytest.approx(1.5)
    assert check_breakdown(breakdown)

    losses = {0: g.tensor(np.array(0.1)), 1: g.tensor(np.array(0.2)), 3: g.tensor(np.array(0.3))}
    _, breakdown = final_loss(l_cls, losses, 2.0)
    assert breakdown.l_ofa_total == pytest.approx(0.6)
    assert sorted(breakdown.l_ofa_per_layer) == [0, 1, 3]

    with pytest.raises(BadConfigError):
        final_loss(l_cls, {}, -1.0)
    with pytest.raises(EmptySelectionError):
        final_loss(l_cls, {}, 10.0)
    print("✅ 组合损失测试通过")


def test_layer_presets():
    assert resolve_layer_preset("first", 12).layers == (0,)
    assert resolve_layer_preset("first+last", 12).layers == (0, 11)
    assert resolve_layer_preset("first+middle+last", 12).layers == (0, 5, 11)
    assert resolve_layer_preset("all", 3).layers == (0, 1, 2)
    assert resolve_layer_preset("none", 3).layers == ()
    assert resolve_layer_preset("2,0", 4).layers == (0, 2)
    assert resolve_layer_preset("first+last", 1).layers == (0,)
    with pytest.raises(BadLayerError):
        resolve_layer_preset("5", 4)
    with pytest.raises(BadLayerError):
        resolve_layer_preset("top", 4)


def _toy_sample():
    phantom = synthesize(PhantomConfig(dims=(24, 24, 24)), 0, 1)
    config = VitConfig(input_dims=(24, 24, 24), patch_size=(8, 8, 8), embed_dim=32, layers=2, heads=2)
    grid = partition(config.input_dims, config.patch_size)
    return config, phantom, softmax_target(build_opam(phantom.mask, grid))


def test_ofa_gradient_reaches_query_key():
    """α > 0 时选中层的 Q/K 梯度与 α = 0 时不同"""
    print("\n=== 测试 OFA 梯度流 ===")
    config, phantom, target = _toy_sample()
    params = init_params(config)
    selection = resolve_layer_preset("first", config.layers)

    def grads(alpha):
        graph = Graph()
        bound = bind(params, graph, requires_grad=True)
        sample = compute_sample_loss(params, phantom.volume, phantom.label, target, selection,
                                     alpha, graph=graph, bound=bound)
        graph.backward(sample.total)
        return {k: bound[k].grad for k in ("blocks.0.attn.q.w", "blocks.0.attn.k.w")}

    with_ofa, without = grads(1000.0), grads(0.0)
    for k in with_ofa:
        assert not np.allclose(with_ofa[k], without[k])
    print("✅ OFA 梯度流测试通过")


def test_full_loss_grad_check():
    """完整组合损失（α=1000）的有限差分检验"""
    config, phantom, target = _toy_sample()
    params = init_params(config)
    selection = resolve_layer_preset("first+last", config.layers)

    def f(graph, leaves):
        return compute_sample_loss(params, phantom.volume, phantom.label, target, selection,
                                   1000.0, graph=graph, bound=leaves).total

    report = ag.grad_check(f, params.tensors, epsilon=1e-4, tolerance=1e-4, max_coordinates=200)
    assert report.passed, report


def test_per_head_and_cls_modes():
    config, phantom, _ = _toy_sample()
    grid = partition(config.input_dims, config.patch_size)
    params = init_params(config)
    selection = resolve_layer_preset("first", config.layers)
    opam = build_opam(phantom.mask, grid)
    mean_mode = compute_sample_loss(params, phantom.volume, 1, softmax_target(opam), selection,
                                    1.0, head_mode="mean", requires_grad=False)
    per_head = compute_sample_loss(params, phantom.volume, 1, softmax_target(opam), selection,
                                   1.0, head_mode="per_head", requires_grad=False)
    with_cls = compute_sample_loss(params, phantom.volume, 1, softmax_target(opam, include_cls=True),
                                   selection, 1.0, include_cls=True, requires_grad=False)
    # 逐头误差的平均不小于平均注意力的误差（凸性）
    assert per_head.breakdown.l_ofa_total >= mean_mode.breakdown.l_ofa_total - 1e-15
    assert with_cls.breakdown.l_ofa_total > 0
    assert mean_mode.breakdown.l_classification == per_head.breakdown.l_classification


if __name__ == "__main__":
    import sys
    print("🧪 开始损失函数测试...\n")
    sys.exit(pytest.main([__file__, "-q"]))
