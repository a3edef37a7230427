"""
注意力 rollout：逐层残差混合后连乘，得到 CLS→patch 热力图
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import EmptyStackError, GridMismatchError
from .opam_service import build_opam
from .schemas import RolloutRecord
from .vit_model import AttentionStack, VitParams, check_config, forward
from .volume_service import PatchGrid, SegMask, Volume, save_volume, unpatchify

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RolloutMap:
    matrix: np.ndarray  # (N+1, N+1)

    @property
    def cls_to_patch(self) -> np.ndarray:
        return self.matrix[0, 1:]

    @property
    def n_patches(self) -> int:
        return self.matrix.shape[0] - 1


def _residual_mix(a: np.ndarray) -> np.ndarray:
    mixed = 0.5 * (a + np.eye(a.shape[0]))
    return mixed / mixed.sum(axis=1, keepdims=True)


def rollout_matrices(layers: Sequence[np.ndarray]) -> RolloutMap:
    """layers 为各层头平均后的注意力矩阵，按层序给出"""
    if len(layers) == 0:
        raise EmptyStackError("注意力栈为空，无法计算 rollout")
    result = _residual_mix(np.asarray(layers[0], dtype=np.float64))
    for a in layers[1:]:
        result = _residual_mix(np.asarray(a, dtype=np.float64)) @ result
    return RolloutMap(matrix=result)


def attention_rollout(attn: AttentionStack) -> RolloutMap:
    if attn.n_layers == 0:
        raise EmptyStackError("注意力栈为空，无法计算 rollout")
    return rollout_matrices([attn.as_array()[l].mean(axis=0) for l in range(attn.n_layers)])


def heatmap_volume(rollout: RolloutMap, grid: PatchGrid, dims=None,
                   spacing=(1.0, 1.0, 1.0)) -> Volume:
    """每个 patch 的权重均匀铺满该 patch 的体素块"""
    if rollout.n_patches != grid.n:
        raise GridMismatchError(f"rollout 向量长度 {rollout.n_patches} 与网格 N={grid.n} 不一致")
    if dims is not None and tuple(dims) != grid.volume_dims:
        raise GridMismatchError(f"输出尺寸 {tuple(dims)} 与网格 {grid.volume_dims} 不一致")
    values = np.clip(rollout.cls_to_patch, 0.0, None)
    return Volume(dims=grid.volume_dims, data=unpatchify(values, grid), spacing=spacing)


def organ_attention_mass(rollout: RolloutMap, organ_patches: Iterable[int]) -> float:
    weights = rollout.cls_to_patch
    organ = sorted(set(organ_patches))
    total = float(weights.sum())
    if not organ or total <= 0:
        return 0.0
    return float(np.clip(weights[organ].sum() / total, 0.0, 1.0))


def write_pgm_slices(heatmap: Volume, slices: Sequence[int], out_dir) -> List[str]:
    """按体积整体 min-max 归一化为 8 位，逐个轴向切片写 P5 PGM"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = heatmap.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    scaled = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)

    paths = []
    for z in slices:
        if not 0 <= z < heatmap.dims[0]:
            raise GridMismatchError(f"切片 {z} 超出 [0, {heatmap.dims[0]})")
        image = pixels[z]
        path = out_dir / f"slice_{z:03d}.pgm"
        with open(path, "wb") as f:
            f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
            f.write(np.ascontiguousarray(image).tobytes())
        paths.append(str(path))
    return paths


def run_rollout(params: VitParams, volume: Volume, out_dir, mask: Optional[SegMask] = None,
                slices: Sequence[int] = (), min_voxels: int = 1) -> RolloutRecord:
    """推理一次，导出 heatmap.vvol、可选 PGM 切片，有掩码时给出器官注意力占比"""
    grid = check_config(params.config)
    out_dir = Path(out_dir)
    rollout = attention_rollout(forward(params, volume).attention)
    heatmap = heatmap_volume(rollout, grid, volume.dims, spacing=volume.spacing)
    heatmap_path = out_dir / "heatmap.vvol"
    save_volume(heatmap, heatmap_path)

    mass = None
    if mask is not None:
        mass = organ_attention_mass(rollout, build_opam(mask, grid, min_voxels).organ_indices)
        logger.info(f"器官注意力占比: {mass:.4f}")
    return RolloutRecord(
        organ_attention_mass=mass,
        cls_to_patch=rollout.cls_to_patch.tolist(),
        heatmap=str(heatmap_path),
        slices=write_pgm_slices(heatmap, slices, out_dir / "slices") if slices else [],
    )
