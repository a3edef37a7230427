"""
合成体模数据集

每个样本：高斯噪声背景 + 一个椭球"器官"（精确掩码）；
阳性样本在器官内放一个更暗的球形"病灶"；
两类样本都在器官外放置与病灶对比度相当的干扰物，使背景不含标签信息。
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigInfeasibleError
from .metrics_service import roc_auc, scored_set
from .schemas import BayesCheckReport, ManifestEntry, PhantomConfig
from .volume_service import SegMask, Volume, save_mask, save_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
_LABEL_STREAM = 0xC1A55
_BOX = np.ones((3, 3, 3), dtype=bool)


@dataclass
class Phantom:
    volume: Volume
    mask: SegMask
    label: int
    organ_center: Tuple[float, float, float]
    organ_radii: Tuple[float, float, float]
    lesion_center: Optional[Tuple[float, float, float]] = None


def check_feasible(config: PhantomConfig):
    r_max = config.organ_radius[1]
    for axis, dim in enumerate(config.dims):
        if 2 * r_max + 2 * config.margin + 1 > dim:
            raise ConfigInfeasibleError(
                f"第{axis}维 {dim} 容纳不下半径 {r_max} 的器官（边距 {config.margin}）"
            )
    if config.lesion_radius[1] >= config.organ_radius[0]:
        raise ConfigInfeasibleError(
            f"病灶最大半径 {config.lesion_radius[1]} 必须小于器官最小半径 {config.organ_radius[0]}"
        )


def ellipsoid_mask(dims, center, radii) -> np.ndarray:
    """体素中心（整数坐标）落在椭球内即为器官"""
    z, y, x = np.ogrid[:dims[0], :dims[1], :dims[2]]
    return (
        ((z - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((x - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _point_in_unit_ball(rng: np.random.Generator) -> np.ndarray:
    while True:
        p = rng.uniform(-1.0, 1.0, size=3)
        if p @ p <= 1.0:
            return p


def synthesize(config: PhantomConfig, index: int, label: int) -> Phantom:
    """
    第 index 个样本。器官、病灶、干扰物、噪声各用独立的随机流，
    流只由 (seed, index) 决定，所以并行与串行生成结果逐字节一致，
    且干扰物的摆放与标签无关。
    """
    dims = tuple(config.dims)
    organ_rng, lesion_rng, distractor_rng, noise_rng = (
        np.random.default_rng([config.seed, index, stream]) for stream in range(4)
    )

    radii = organ_rng.uniform(config.organ_radius[0], config.organ_radius[1], size=3)
    center = np.array([
        organ_rng.uniform(config.margin + r, d - 1 - config.margin - r)
        for r, d in zip(radii, dims)
    ])
    organ = ellipsoid_mask(dims, center, radii)
    volume = np.where(organ, config.organ_level, config.background_level).astype(np.float64)

    lesion_center = None
    if label == 1:
        lesion_r = lesion_rng.uniform(config.lesion_radius[0], config.lesion_radius[1])
        lesion_center = center + (radii - lesion_r) * _point_in_unit_ball(lesion_rng)
        lesion = ellipsoid_mask(dims, lesion_center, (lesion_r,) * 3) & organ
        volume[lesion] -= config.lesion_delta

    keep_out = ndimage.binary_dilation(organ)
    for _ in range(config.distractor_count):
        for _attempt in range(100):
            r = distractor_rng.uniform(config.lesion_radius[0], config.lesion_radius[1])
            c = [distractor_rng.uniform(r, d - 1 - r) for d in dims]
            blob = ellipsoid_mask(dims, c, (r,) * 3)
            if not (blob & keep_out).any():
                volume[blob] -= config.distractor_delta
                keep_out |= blob
                break
        else:
            logger.debug(f"样本 {index}: 干扰物放置失败，跳过")

    volume += noise_rng.normal(0.0, config.noise_std, size=dims) if config.noise_std > 0 else 0.0
    return Phantom(
        volume=Volume(dims=dims, data=volume, spacing=config.spacing),
        mask=SegMask(dims=dims, labels=organ.astype(np.uint8)),
        label=int(label),
        organ_center=tuple(float(c) for c in center),
        organ_radii=tuple(float(r) for r in radii),
        lesion_center=None if lesion_center is None else tuple(float(c) for c in lesion_center),
    )


def assign_labels(config: PhantomConfig) -> np.ndarray:
    """恰好 round(count·balance) 个阳性，位置由种子决定"""
    n_pos = int(round(config.count * config.class_balance))
    labels = np.zeros(config.count, dtype=np.int64)
    order = np.random.default_rng([config.seed, _LABEL_STREAM]).permutation(config.count)
    labels[order[:n_pos]] = 1
    return labels


def generate(config: PhantomConfig, out_dir, threads: int = 1) -> List[ManifestEntry]:
    """生成数据集，写出 VVOL 体数据/掩码与 manifest.json"""
    check_feasible(config)
    out_dir = Path(out_dir)
    labels = assign_labels(config)

    def write_one(index: int) -> ManifestEntry:
        phantom = synthesize(config, index, int(labels[index]))
        volume_path = f"volumes/sample_{index:04d}.vvol"
        mask_path = f"masks/sample_{index:04d}.vvol"
        save_volume(phantom.volume, out_dir / volume_path)
        save_mask(phantom.mask, out_dir / mask_path, spacing=config.spacing)
        return ManifestEntry(volume=volume_path, mask=mask_path, label=phantom.label)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        entries = list(pool.map(write_one, range(config.count)))

    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(
        json.dumps([e.model_dump() for e in entries], indent=2, ensure_ascii=False),
        encoding="utf-8",
    )
    logger.info(f"合成数据集已写入 {out_dir}: {config.count} 个样本，阳性 {int(labels.sum())} 个")
    return entries


def _dip_score(data: np.ndarray, region: np.ndarray) -> float:
    """区域中位数 − 区域内最暗的 3³ 局部均值"""
    inner = ndimage.binary_erosion(region, structure=_BOX)
    if not inner.any():
        inner = region
    local = ndimage.uniform_filter(data, size=3, mode="nearest")
    return float(np.median(data[region]) - local[inner].min())


def oracle_scores(phantom: Phantom) -> Tuple[float, float]:
    """(器官内分数, 仅背景分数)，两者都直接使用真值掩码"""
    data = phantom.volume.data.astype(np.float64)
    organ = phantom.mask.labels > 0
    background = ~ndimage.binary_dilation(organ)
    return _dip_score(data, organ), _dip_score(data, background)


def bayes_check(config: PhantomConfig, n_samples: int = 500) -> BayesCheckReport:
    """
    在新抽取的 n_samples 个样本上检验任务可学：
    器官内的解析判别器 AUC ≥ 0.95，而只看背景的判别器 AUC ≤ 0.65
    """
    check_feasible(config)
    fresh = config.model_copy(update={"seed": config.seed + 1_000_003, "count": n_samples})
    labels = assign_labels(fresh)
    organ_scores, background_scores = [], []
    for index in range(n_samples):
        o, b = oracle_scores(synthesize(fresh, index, int(labels[index])))
        organ_scores.append(o)
        background_scores.append(b)
    oracle_auc = roc_auc(scored_set(organ_scores, labels))
    background_auc = roc_auc(scored_set(background_scores, labels))
    report = BayesCheckReport(
        oracle_auc=oracle_auc,
        background_auc=background_auc,
        learnable=oracle_auc >= 0.95 and background_auc <= 0.65,
    )
    logger.info(f"可学性检验: 器官判别 AUC={oracle_auc:.3f}, 背景判别 AUC={background_auc:.3f}")
    return report
