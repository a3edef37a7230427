"""
器官 patch 注意力矩阵（OPAM）服务

M[i, j] = 1 当且仅当 patch i 与 patch j 含有同一器官标签；
训练目标 M' 为 M 的逐行 softmax。
"""
import hashlib
import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy.special import softmax

from .volume_service import PatchGrid, SegMask, organ_patches

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Opam:
    """二值 N×N 器官共注意力矩阵"""
    n: int
    m: np.ndarray

    @property
    def organ_indices(self) -> List[int]:
        """器官 patch 的索引（对角线为 1 的行）"""
        return [int(i) for i in np.flatnonzero(np.diag(self.m) > 0)]


@dataclass(frozen=True)
class OpamTarget:
    """M' = softmax(M)，逐行和为 1"""
    n: int
    t: np.ndarray


def build_opam(mask: SegMask, grid: PatchGrid, min_voxels: int = 1) -> Opam:
    label_sets = organ_patches(mask, grid, min_voxels=min_voxels)
    labels = sorted(set().union(*label_sets)) if label_sets else []
    # patch × 标签 指示矩阵，两行有公共标签 ⇔ 内积 > 0
    membership = np.zeros((grid.n, len(labels)), dtype=np.int64)
    column = {k: c for c, k in enumerate(labels)}
    for i, present in enumerate(label_sets):
        for k in present:
            membership[i, column[k]] = 1
    m = (membership @ membership.T > 0).astype(np.float64)
    m.flags.writeable = False
    return Opam(n=grid.n, m=m)


def softmax_target(opam: Opam, include_cls: bool = False) -> OpamTarget:
    """
    逐行 softmax：含 k 个 1 的行，器官列为 e/(k·e+N−k)，其余为 1/(k·e+N−k)；
    全零行（背景 patch）得到均匀分布 1/N。

    include_cls=True 时在第 0 行/列补一个全零的 CLS，得到 (N+1)×(N+1) 目标。
    """
    m = opam.m
    if include_cls:
        m = np.pad(m, ((1, 0), (1, 0)))
    t = softmax(m, axis=1)
    t.flags.writeable = False
    return OpamTarget(n=t.shape[0], t=t)


def mask_digest(mask: SegMask) -> str:
    return hashlib.sha256(mask.labels.tobytes() + str(mask.dims).encode()).hexdigest()


class OpamCache:
    """OPAM 目标在各 epoch 间不变，按 (掩码哈希, 网格, 参数) 缓存"""

    def __init__(self):
        self._targets: Dict[Tuple, OpamTarget] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, mask: SegMask, grid: PatchGrid, min_voxels: int = 1,
            include_cls: bool = False) -> OpamTarget:
        key = (mask_digest(mask), grid, min_voxels, include_cls)
        with self._lock:
            cached = self._targets.get(key)
            if cached is not None:
                self.hits += 1
                logger.debug(f"从缓存获取 OPAM 目标: {key[0][:12]}")
                return cached
        target = softmax_target(build_opam(mask, grid, min_voxels), include_cls=include_cls)
        with self._lock:
            self._targets.setdefault(key, target)
            self.misses += 1
        return target

    def __len__(self) -> int:
        return len(self._targets)
