#!/usr/bin/env python3
"""
测试 OPAM 构建、softmax 目标与缓存
"""
import numpy as np
import pytest
from scipy.special import softmax

from ofa_lab.opam_service import OpamCache, build_opam, softmax_target
from ofa_lab.volume_service import SegMask, partition, patchify


def brute_force_opam(labels: np.ndarray, grid) -> np.ndarray:
    sets = []
    for i in range(grid.n):
        block = labels[grid.slices(i)]
        sets.append(set(np.unique(block[block > 0]).tolist()))
    m = np.zeros((grid.n, grid.n))
    for i in range(grid.n):
        for j in range(grid.n):
            m[i, j] = 1.0 if sets[i] & sets[j] else 0.0
    return m


def test_opam_examples():
    """测试 OPAM 的典型情况"""
    print("=== 测试 OPAM 构建 ===")
    grid = partition((8, 8, 8), (4, 4, 4))
    empty = SegMask(dims=(8, 8, 8), labels=np.zeros((8, 8, 8)))
    assert build_opam(empty, grid).m.sum() == 0

    full = SegMask(dims=(8, 8, 8), labels=np.ones((8, 8, 8)))
    assert (build_opam(full, grid).m == 1).all()

    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[0, 0, 0] = 1  # patch 0
    labels[1, 5, 6] = 1  # patch 3
    opam = build_opam(SegMask(dims=(8, 8, 8), labels=labels), grid)
    expected = np.zeros((8, 8))
    for i in (0, 3):
        for j in (0, 3):
            expected[i, j] = 1
    np.testing.assert_array_equal(opam.m, expected)
    assert opam.organ_indices == [0, 3]
    print("✅ OPAM 构建测试通过")


def test_opam_matches_brute_force():
    """100 个随机多标签掩码与逐对求交的结果完全一致"""
    rng = np.random.default_rng(0)
    shapes = [((8, 8, 8), (4, 4, 4)), ((12, 8, 8), (4, 4, 2)), ((16, 16, 16), (4, 4, 4))]
    for trial in range(100):
        dims, patch = shapes[trial % len(shapes)]
        grid = partition(dims, patch)
        assert grid.n <= 64
        labels = np.where(rng.random(dims) < 0.05, rng.integers(1, 4, size=dims), 0)
        opam = build_opam(SegMask(dims=dims, labels=labels), grid)
        np.testing.assert_array_equal(opam.m, brute_force_opam(labels, grid))
        assert (opam.m == opam.m.T).all()


def _permute_patches(labels: np.ndarray, grid, perm) -> np.ndarray:
    """新的第 i 个 patch 取原来第 perm[i] 个 patch 的内容"""
    blocks = patchify(labels, grid)
    out = np.zeros_like(labels)
    for i, source in enumerate(perm):
        out[grid.slices(i)] = blocks[source].reshape(grid.patch_size)
    return out


def test_opam_permutation_equivariance():
    """打乱 patch 顺序后，M 与 M' 按同一置换变换：P·M·Pᵀ"""
    rng = np.random.default_rng(3)
    grid = partition((8, 8, 8), (4, 4, 4))
    for _ in range(20):
        labels = np.where(rng.random((8, 8, 8)) < 0.08, rng.integers(1, 4, size=(8, 8, 8)), 0)
        perm = rng.permutation(grid.n)
        opam = build_opam(SegMask(dims=(8, 8, 8), labels=labels), grid)
        moved = build_opam(SegMask(dims=(8, 8, 8), labels=_permute_patches(labels, grid, perm)), grid)
        np.testing.assert_array_equal(moved.m, opam.m[np.ix_(perm, perm)])
        np.testing.assert_allclose(softmax_target(moved).t, softmax_target(opam).t[np.ix_(perm, perm)],
                                   rtol=0, atol=1e-15)


def test_opam_relabel_invariance():
    """器官编号一一替换不改变 M"""
    rng = np.random.default_rng(4)
    grid = partition((8, 8, 8), (4, 4, 4))
    relabel = np.array([0, 7, 3, 1], dtype=np.uint8)  # 0 保持为背景
    for _ in range(20):
        labels = np.where(rng.random((8, 8, 8)) < 0.05, rng.integers(1, 4, size=(8, 8, 8)), 0)
        opam = build_opam(SegMask(dims=(8, 8, 8), labels=labels), grid)
        renamed = build_opam(SegMask(dims=(8, 8, 8), labels=relabel[labels]), grid)
        np.testing.assert_array_equal(renamed.m, opam.m)


def test_softmax_target_rows():
    print("\n=== 测试 softmax 目标 ===")
    grid = partition((8, 8, 8), (4, 4, 4))
    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[0, 0, 0] = 1
    labels[1, 5, 6] = 1
    target = softmax_target(build_opam(SegMask(dims=(8, 8, 8), labels=labels), grid))
    np.testing.assert_allclose(target.t.sum(axis=1), 1.0, atol=1e-9)
    e = np.e
    assert target.t[0, 0] == pytest.approx(e / (2 * e + 6), abs=1e-12)
    assert target.t[0, 0] == pytest.approx(0.23767, abs=1e-5)
    assert target.t[0, 1] == pytest.approx(0.08744, abs=1e-5)
    np.testing.assert_allclose(target.t[1], np.full(8, 1 / 8))  # 背景行为均匀分布
    np.testing.assert_allclose(target.t, softmax(brute_force_opam(labels, grid), axis=1))
    print("✅ softmax 目标测试通过")


def test_softmax_uniform_rows():
    grid = partition((8, 8, 4), (4, 4, 4))
    zero = softmax_target(build_opam(SegMask(dims=(8, 8, 4), labels=np.zeros((8, 8, 4))), grid))
    ones = softmax_target(build_opam(SegMask(dims=(8, 8, 4), labels=np.ones((8, 8, 4))), grid))
    np.testing.assert_allclose(zero.t, 0.25)
    np.testing.assert_allclose(ones.t, 0.25)


def test_softmax_target_with_cls():
    grid = partition((8, 8, 8), (4, 4, 4))
    full = SegMask(dims=(8, 8, 8), labels=np.ones((8, 8, 8)))
    target = softmax_target(build_opam(full, grid), include_cls=True)
    assert target.n == 9
    np.testing.assert_allclose(target.t[0], np.full(9, 1 / 9))
    np.testing.assert_allclose(target.t.sum(axis=1), 1.0, atol=1e-12)


def test_opam_cache():
    grid = partition((8, 8, 8), (4, 4, 4))
    labels = np.zeros((8, 8, 8), dtype=np.uint8)
    labels[:4] = 1
    cache = OpamCache()
    first = cache.get(SegMask(dims=(8, 8, 8), labels=labels), grid)
    second = cache.get(SegMask(dims=(8, 8, 8), labels=labels.copy()), grid)
    assert first is second
    assert (cache.hits, cache.misses, len(cache)) == (1, 1, 1)
    cache.get(SegMask(dims=(8, 8, 8), labels=labels), grid, include_cls=True)
    assert len(cache) == 2


if __name__ == "__main__":
    import sys
    print("🧪 开始 OPAM 测试...\n")
    sys.exit(pytest.main([__file__, "-q"]))
