#!/usr/bin/env python3
"""
测试 3D ViT：初始化、前向注意力、头平均与检查点
"""
import numpy as np
import pytest

from ofa_lab import autograd as ag
from ofa_lab.autograd import Graph
from ofa_lab.errors import BadConfigError, BadHeaderError, BadLayerError, DimMismatchError
from ofa_lab.schemas import VitConfig
from ofa_lab.vit_model import (
    AttentionStack, forward, init_params, load_checkpoint, mean_head_attention, save_checkpoint,
)
from ofa_lab.volume_service import Volume, partition

SMALL = VitConfig(input_dims=(24, 24, 24), patch_size=(8, 8, 8), embed_dim=32, layers=2, heads=2)


def _volume(seed=0, dims=(24, 24, 24)):
    return Volume(dims=dims, data=np.random.default_rng(seed).random(dims))


def test_init_params():
    """测试参数初始化的确定性"""
    print("=== 测试参数初始化 ===")
    a, b = init_params(SMALL), init_params(SMALL)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k])
    c = init_params(SMALL.model_copy(update={"seed": 1}))
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)
    assert VitConfig(embed_dim=64, heads=4).head_dim == 16
    assert np.abs(a.tensors["blocks.0.attn.q.w"]).max() <= 0.04 + 1e-12
    print("✅ 参数初始化测试通过")


def test_bad_config():
    with pytest.raises(BadConfigError):
        init_params(SMALL.model_copy(update={"embed_dim": 30, "heads": 4}))
    with pytest.raises(BadConfigError):
        init_params(SMALL.model_copy(update={"input_dims": (24, 24, 20)}))


def test_forward_attention_shapes():
    print("\n=== 测试前向传播 ===")
    params = init_params(SMALL)
    fp = forward(params, _volume())
    stack = fp.attention.as_array()
    assert stack.shape == (2, 2, 28, 28)
    np.testing.assert_allclose(stack.sum(axis=-1), 1.0, atol=1e-6)
    assert fp.logit.shape == ()

    again = forward(params, _volume())
    assert again.logit.item() == fp.logit.item()
    np.testing.assert_array_equal(again.attention.as_array(), stack)
    print("✅ 前向传播测试通过")


def test_token_order_follows_patch_index():
    """只点亮第 k 个 patch 的体素，位置编码之前只有第 k 个 patch token 改变"""
    params = init_params(SMALL)
    grid = partition(SMALL.input_dims, SMALL.patch_size)
    dark = forward(params, Volume(dims=(24, 24, 24), data=np.zeros((24, 24, 24)))).patch_embeddings.values
    for k in (0, 5, 13, 26):
        data = np.zeros((24, 24, 24))
        data[grid.slices(k)] = 1.0
        lit = forward(params, Volume(dims=(24, 24, 24), data=data)).patch_embeddings.values
        changed = np.flatnonzero(np.abs(lit - dark).sum(axis=1) > 0)
        assert changed.tolist() == [k]


def test_zero_query_key_gives_uniform_attention():
    params = init_params(SMALL)
    for l in range(SMALL.layers):
        for proj in ("q", "k"):
            params.tensors[f"blocks.{l}.attn.{proj}.w"] = np.zeros((32, 32))
            params.tensors[f"blocks.{l}.attn.{proj}.b"] = np.zeros(32)
    stack = forward(params, _volume(1)).attention.as_array()
    np.testing.assert_allclose(stack, 1.0 / 28, atol=1e-12)


def test_input_dims_checked():
    with pytest.raises(DimMismatchError):
        forward(init_params(SMALL), _volume(dims=(16, 16, 16)))


def test_mean_head_attention():
    g = Graph()
    a = g.tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    b = g.tensor(np.array([[0.0, 1.0], [1.0, 0.0]]))
    mixed = mean_head_attention(AttentionStack(layers=[[a, b]]), 0)
    np.testing.assert_allclose(mixed.values, 0.5)
    assert mean_head_attention(AttentionStack(layers=[[a]]), 0) is a
    same = mean_head_attention(AttentionStack(layers=[[a, a]]), 0)
    np.testing.assert_array_equal(same.values, a.values)
    with pytest.raises(BadLayerError):
        mean_head_attention(AttentionStack(layers=[[a]]), 1)


def test_classification_gradient():
    """分类损失穿过整个前向的梯度"""
    params = init_params(SMALL)
    volume = _volume(2)

    def f(graph, leaves):
        logit = forward(params, volume, graph=graph, bound=leaves).logit
        return ag.bce_with_logits(logit, 1.0)

    report = ag.grad_check(f, params.tensors, epsilon=1e-4, tolerance=1e-4, max_coordinates=150)
    assert report.passed, report


def test_checkpoint_round_trip(tmp_path):
    print("\n=== 测试检查点 ===")
    params = init_params(SMALL)
    extra = {"adam.t": np.array(3.0), "adam.m.head.b": np.ones(1)}
    save_checkpoint(tmp_path / "m.ckpt", params, extra=extra, meta={"epoch": 4})
    loaded, loaded_extra, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.config == SMALL and meta == {"epoch": 4}
    for k, v in params.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k], v)
    assert float(loaded_extra["adam.t"]) == 3.0
    assert forward(loaded, _volume()).logit.item() == forward(params, _volume()).logit.item()

    (tmp_path / "junk.ckpt").write_bytes(b"garbage")
    with pytest.raises(BadHeaderError):
        load_checkpoint(tmp_path / "junk.ckpt")
    print("✅ 检查点测试通过")


if __name__ == "__main__":
    import sys
    print("🧪 开始 ViT 模型测试...\n")
    sys.exit(pytest.main([__file__, "-q"]))
