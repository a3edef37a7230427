"""
训练服务：数据清单、分层划分、OFA 训练循环、检查点、评估与消融扫描
"""
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tqdm import tqdm

from . import autograd as ag
from .autograd import Graph
from .errors import (
    BadConfigError, ClassTooSmallError, EmptySelectionError, ManifestError, MissingMaskError,
    OfaError,
)
from .loss_service import (
    OfaLayerSelection, compute_sample_loss, resolve_layer_preset,
)
from .metrics_service import evaluate_protocol, roc_auc, scored_set
from .opam_service import OpamCache, OpamTarget, build_opam
from .optimizer import AdamState, adam_step
from .phantom_service import synthesize, assign_labels
from .rollout_service import attention_rollout, organ_attention_mass
from .schemas import (
    CompareConfig, CompareRow, CompareSummary, EpochLog, GradCheckReport, ManifestEntry,
    MetricsReport, PhantomConfig, RunConfig, SweepConfig, SweepRow, TrainResult,
)
from .vit_model import (
    VitParams, bind, check_config, forward, init_params, load_checkpoint, predict_logit,
    save_checkpoint,
)
from .volume_service import (
    PatchGrid, SegMask, Volume, crop_to_organ, load_mask, load_volume, normalize_intensity,
)

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "alpha", "layers", "auc", "precision", "recall", "f1"]
COMPARE_COLUMNS = ["seed", "method", "alpha", "layers", "val_auc", "auc", "f1", "organ_attention_mass"]
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


# 数据清单
def load_manifest(path) -> Tuple[List[ManifestEntry], Path]:
    """读取 JSON 数组 [{volume, mask|null, label}]，路径相对清单所在目录"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"无法读取数据清单 {path}: {e}") from e
    if not isinstance(raw, list):
        raise ManifestError(f"数据清单必须是 JSON 数组: {path}")
    try:
        entries = [ManifestEntry.model_validate(item) for item in raw]
    except ValidationError as e:
        raise ManifestError(f"数据清单条目非法: {e}") from e
    return entries, path.parent


def _resolve(base: Path, relative: str) -> Path:
    p = Path(relative)
    return p if p.is_absolute() else base / p


def stratified_split(labels: Sequence[int], ratios=(0.7, 0.1, 0.2),
                     seed: int = 0) -> Tuple[List[int], List[int], List[int]]:
    """每一类单独洗牌后按比例分配，每类在每个划分中至少 1 个样本"""
    labels = np.asarray(labels)
    splits = ([], [], [])
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            raise ClassTooSmallError(f"类别 {cls} 没有样本，无法分层划分")
        idx = idx[np.random.default_rng([seed, cls]).permutation(idx.size)]
        n_val = int(round(idx.size * ratios[1]))
        n_test = int(round(idx.size * ratios[2]))
        n_train = idx.size - n_val - n_test
        for name, count in zip(("train", "val", "test"), (n_train, n_val, n_test)):
            if count < 1:
                raise ClassTooSmallError(f"类别 {cls} 只有 {idx.size} 个样本，{name} 划分为空")
        splits[0].extend(idx[:n_train].tolist())
        splits[1].extend(idx[n_train:n_train + n_val].tolist())
        splits[2].extend(idx[n_train + n_val:].tolist())
    return tuple(sorted(s) for s in splits)


class Dataset:
    """按需加载并缓存体数据；推理路径只读 volume 字段"""

    def __init__(self, entries: List[ManifestEntry], base: Path, config: RunConfig):
        self.entries = entries
        self.base = base
        self.config = config
        self._volumes: Dict[int, Volume] = {}
        self._masks: Dict[int, SegMask] = {}

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.entries]

    def mask(self, i: int) -> SegMask:
        if i not in self._masks:
            entry = self.entries[i]
            if entry.mask is None:
                raise MissingMaskError(f"样本 {i} ({entry.volume}) 没有分割掩码")
            self._masks[i] = load_mask(_resolve(self.base, entry.mask))
        return self._masks[i]

    def model_input(self, i: int) -> Volume:
        if i not in self._volumes:
            try:
                volume = load_volume(_resolve(self.base, self.entries[i].volume))
            except OfaError as e:
                raise ManifestError(f"样本 {i} 体数据无法加载: {e}") from e
            if self.config.method == "sbc":
                volume = crop_to_organ(volume, self.mask(i), self.config.sbc_margin,
                                       out_dims=self.config.model.input_dims)
            if self.config.normalize:
                volume = normalize_intensity(volume, self.config.normalize_window)
            self._volumes[i] = volume
        return self._volumes[i]


def augment(volume: Volume, mask: Optional[SegMask], rng: np.random.Generator,
            flip: bool, intensity: bool) -> Tuple[Volume, Optional[SegMask]]:
    """每轴以 0.5 概率翻转（掩码同步翻转），强度整体缩放 ±10%"""
    data = volume.data
    labels = None if mask is None else mask.labels
    if flip:
        for axis in range(3):
            if rng.random() < 0.5:
                data = np.flip(data, axis=axis)
                labels = None if labels is None else np.flip(labels, axis=axis)
    if intensity:
        data = data * rng.uniform(0.9, 1.1)
    new_volume = Volume(dims=volume.dims, data=data, spacing=volume.spacing)
    new_mask = None if labels is None else SegMask(dims=mask.dims, labels=labels)
    return new_volume, new_mask


def bce_numpy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, logits) - logits * labels


@dataclass
class _SampleResult:
    grads: Dict[str, np.ndarray]
    l_cls: float
    l_ofa: Dict[int, float]
    l_ofa_total: float
    l_final: float
    logit: float


class Trainer:
    """OFA 训练：每个 batch 逐样本前向/反传，按样本顺序累加梯度后做一次 Adam 更新"""

    def __init__(self, config: RunConfig, threads: Optional[int] = None):
        self.config = config
        self.threads = threads or config.threads
        self.grid = check_config(config.model)
        if config.manifest is None:
            raise ManifestError("未指定数据清单 train.manifest")
        entries, base = load_manifest(config.manifest)
        self.dataset = Dataset(entries, base, config)
        self.split = stratified_split(self.dataset.labels, config.split_ratios, config.split_seed)
        self.selection = self._selection()
        self.opam_cache = OpamCache()
        self.out_dir = Path(config.out_dir)

    def _selection(self) -> OfaLayerSelection:
        if self.config.alpha == 0:
            return OfaLayerSelection(layers=(), preset="none")
        if self.config.method == "sbc":
            # 裁剪后的输入与原始掩码的 patch 网格不对应
            raise BadConfigError("sbc 方法只能与 alpha = 0 组合")
        selection = resolve_layer_preset(self.config.layer_preset, self.config.model.layers)
        if not selection.layers:
            raise EmptySelectionError("alpha > 0 时层预设不能为空")
        return selection

    def _check_masks(self):
        needs_masks = self.config.alpha > 0 or self.config.method == "sbc"
        if not needs_masks:
            return
        # sbc 推理也要裁剪，验证集与测试集同样需要掩码
        indices = self.split[0] if self.config.method != "sbc" else [i for s in self.split for i in s]
        missing = [i for i in indices if self.dataset.entries[i].mask is None]
        if missing:
            raise MissingMaskError(f"{len(missing)} 个样本缺少掩码（如样本 {missing[0]}）")

    def _target(self, mask: Optional[SegMask]) -> Optional[OpamTarget]:
        if self.config.alpha == 0 or mask is None:
            return None
        return self.opam_cache.get(mask, self.grid, self.config.min_organ_voxels,
                                   self.config.ofa_include_cls)

    def _run_sample(self, params: VitParams, index: int, epoch: int) -> _SampleResult:
        cfg = self.config
        volume = self.dataset.model_input(index)
        mask = self.dataset.mask(index) if cfg.alpha > 0 else None
        if cfg.augment_flip or cfg.augment_intensity:
            rng = np.random.default_rng([cfg.seed, epoch, index])
            volume, mask = augment(volume, mask, rng, cfg.augment_flip, cfg.augment_intensity)

        graph = Graph()
        bound = bind(params, graph, requires_grad=True)
        sample = compute_sample_loss(
            params, volume, self.dataset.entries[index].label, self._target(mask),
            self.selection, cfg.alpha, cfg.ofa_head_mode, cfg.ofa_include_cls,
            graph=graph, bound=bound,
        )
        graph.backward(sample.total)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in bound.items()}
        b = sample.breakdown
        return _SampleResult(grads, b.l_classification, b.l_ofa_per_layer, b.l_ofa_total,
                             b.l_final, sample.logit)

    def _score(self, params: VitParams, indices: Sequence[int], pool) -> np.ndarray:
        return np.array(list(pool.map(lambda i: predict_logit(params, self.dataset.model_input(i)), indices)))

    def _meta(self, epoch: int, step: int, best_epoch: int, best_auc: Optional[float]) -> dict:
        return {
            "run": self.config.model_dump(mode="json", exclude={"out_dir", "threads"}),
            "epoch": epoch,
            "step": step,
            "best_epoch": best_epoch,
            "best_val_auc": best_auc,
            "split": {"train": self.split[0], "val": self.split[1], "test": self.split[2]},
        }

    def fit(self, resume: Optional[str] = None) -> TrainResult:
        cfg = self.config
        self._check_masks()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        train_log = self.out_dir / "train_log.jsonl"
        loss_log = self.out_dir / "loss_log.jsonl"

        if resume:
            params, extra, meta = load_checkpoint(resume)
            state = AdamState.from_tensors(extra, params.tensors.keys(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            start_epoch, step = meta["epoch"] + 1, meta["step"]
            best_epoch, best_auc = meta["best_epoch"], meta["best_val_auc"]
            logger.info(f"从检查点恢复训练: {resume}（第 {start_epoch} 轮起）")
        else:
            params = init_params(cfg.model)
            state = AdamState.fresh(params.tensors, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            start_epoch, step, best_epoch, best_auc = 0, 0, -1, None
            train_log.write_text("", encoding="utf-8")
            loss_log.write_text("", encoding="utf-8")

        train_idx, val_idx, _ = self.split
        train_labels = np.array([self.dataset.entries[i].label for i in train_idx])
        val_labels = np.array([self.dataset.entries[i].label for i in val_idx])
        logger.info(f"开始训练: 方法={cfg.method_label}, alpha={cfg.alpha}, 层={self.selection.layers}, "
                    f"划分 {len(train_idx)}/{len(val_idx)}/{len(self.split[2])}")

        epochs = tqdm(range(start_epoch, cfg.epochs), desc="epoch", disable=not sys.stderr.isatty())
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            for epoch in epochs:
                order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
                logits = {}
                sums = {"l_cls": 0.0, "l_ofa": 0.0}
                for start in range(0, len(order), cfg.batch_size):
                    batch = [int(i) for i in order[start:start + cfg.batch_size]]
                    results = list(pool.map(lambda i: self._run_sample(params, i, epoch), batch))
                    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
                    for r in results:  # 固定顺序累加
                        for k, g in r.grads.items():
                            grads[k] += g
                    grads = {k: g / len(batch) for k, g in grads.items()}
                    new_tensors, state = adam_step(params.tensors, grads, state)
                    params = VitParams(config=params.config, tensors=new_tensors)
                    step += 1

                    record = {
                        "step": step,
                        "l_cls": float(np.mean([r.l_cls for r in results])),
                        "l_ofa": {str(l): float(np.mean([r.l_ofa[l] for r in results]))
                                  for l in self.selection.layers},
                        "alpha": cfg.alpha,
                        "l_final": float(np.mean([r.l_final for r in results])),
                    }
                    with open(loss_log, "a", encoding="utf-8") as f:
                        f.write(json.dumps(record) + "\n")
                    for i, r in zip(batch, results):
                        logits[i] = r.logit
                        sums["l_cls"] += r.l_cls
                        sums["l_ofa"] += r.l_ofa_total

                train_scores = np.array([logits[i] for i in train_idx])
                val_scores = self._score(params, val_idx, pool)
                train_auc = _safe_auc(train_scores, train_labels)
                val_auc = _safe_auc(val_scores, val_labels)
                logs = [
                    EpochLog(epoch=epoch, split="train", l_cls=sums["l_cls"] / len(train_idx),
                             l_ofa_total=sums["l_ofa"] / len(train_idx), auc=train_auc),
                    EpochLog(epoch=epoch, split="val",
                             l_cls=float(bce_numpy(val_scores, val_labels).mean()), auc=val_auc),
                ]
                with open(train_log, "a", encoding="utf-8") as f:
                    for entry in logs:
                        f.write(entry.model_dump_json() + "\n")

                if best_epoch < 0 or (val_auc is not None and (best_auc is None or val_auc > best_auc)):
                    best_epoch, best_auc = epoch, val_auc
                    save_checkpoint(self.out_dir / BEST_CHECKPOINT, params,
                                    meta=self._meta(epoch, step, best_epoch, best_auc))
                save_checkpoint(self.out_dir / LAST_CHECKPOINT, params, extra=state.to_tensors(),
                                meta=self._meta(epoch, step, best_epoch, best_auc))
                logger.info(f"第 {epoch} 轮: 训练 L_cls={logs[0].l_cls:.4f}, "
                            f"L_OFA={logs[0].l_ofa_total:.5f}, 验证 AUC={val_auc}")

        result = TrainResult(
            out_dir=str(self.out_dir),
            best_checkpoint=str(self.out_dir / BEST_CHECKPOINT),
            last_checkpoint=str(self.out_dir / LAST_CHECKPOINT),
            best_epoch=best_epoch,
            best_val_auc=best_auc,
            split={"train": self.split[0], "val": self.split[1], "test": self.split[2]},
        )
        (self.out_dir / "train_result.json").write_text(result.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"训练完成: 最佳第 {best_epoch} 轮，验证 AUC={best_auc}")
        return result


def _safe_auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    if labels.size == 0 or labels.min() == labels.max():
        return None
    return roc_auc(scored_set(scores, labels))


def train(config: RunConfig, threads: Optional[int] = None, resume: Optional[str] = None) -> TrainResult:
    return Trainer(config, threads=threads).fit(resume=resume)


# 评估
def _logit_and_mass(params: VitParams, dataset: Dataset, index: int, grid: PatchGrid,
                    with_mass: bool) -> Tuple[float, Optional[float]]:
    """一次前向同时得到 logit 与 rollout 器官注意力占比（没有掩码时占比为 None）"""
    result = forward(params, dataset.model_input(index))
    if not with_mass or dataset.entries[index].mask is None:
        return result.logit.item(), None
    organ = build_opam(dataset.mask(index), grid, dataset.config.min_organ_voxels).organ_indices
    return result.logit.item(), organ_attention_mass(attention_rollout(result.attention), organ)


def evaluate_checkpoint(checkpoint, manifest=None, threshold_on: str = "val",
                        threads: int = 1) -> MetricsReport:
    """
    用检查点里记录的划分重新划分数据：验证集选阈值，测试集出指标。
    vit 方法的推理只读取体数据，掩码字段可以全部为 null；
    有掩码的测试样本额外给出 rollout 器官注意力占比的均值。
    """
    params, _, meta = load_checkpoint(checkpoint)
    run = RunConfig.model_validate(meta["run"])
    if manifest is not None:
        run = run.model_copy(update={"manifest": str(manifest)})
    if run.manifest is None:
        raise ManifestError("评估需要数据清单")
    entries, base = load_manifest(run.manifest)
    dataset = Dataset(entries, base, run)
    _, val_idx, test_idx = stratified_split(dataset.labels, run.split_ratios, run.split_seed)
    grid = check_config(params.config)
    # sbc 的输入是裁剪后重采样的体数据，与掩码的 patch 网格不对应
    with_mass = run.method == "vit"

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        val_logits = list(pool.map(lambda i: predict_logit(params, dataset.model_input(i)), val_idx))
        test_out = list(pool.map(lambda i: _logit_and_mass(params, dataset, i, grid, with_mass), test_idx))

    val = scored_set(val_logits, [entries[i].label for i in val_idx])
    test = scored_set([logit for logit, _ in test_out], [entries[i].label for i in test_idx])
    report = evaluate_protocol(val, test, threshold_on=threshold_on)
    masses = [m for _, m in test_out if m is not None]
    if masses:
        mass = float(np.mean(masses))
        logger.info(f"测试集器官注意力占比均值: {mass:.4f}（{len(masses)} 个样本）")
        report = report.model_copy(update={"organ_attention_mass": mass})
    return report


def append_results_row(path, row: SweepRow):
    path = Path(path)
    frame = pd.DataFrame([row.model_dump()], columns=RESULT_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)


def sweep_row(run: RunConfig, report: Optional[MetricsReport], layers_label: str) -> SweepRow:
    return SweepRow(
        method=run.method_label,
        alpha=run.alpha,
        layers=layers_label,
        auc=None if report is None else report.auc,
        precision=None if report is None else report.precision,
        recall=None if report is None else report.recall,
        f1=None if report is None else report.f1,
    )


def sweep_cells(base: RunConfig, grid: SweepConfig) -> List[RunConfig]:
    cells = []
    if grid.include_baseline:
        cells.append(base.model_copy(update={"alpha": 0.0, "layer_preset": "none", "method": "vit"}))
    if grid.include_sbc:
        cells.append(base.model_copy(update={"alpha": 0.0, "layer_preset": "none", "method": "sbc"}))
    for alpha in grid.alphas:
        for preset in grid.presets:
            cells.append(base.model_copy(update={"alpha": float(alpha), "layer_preset": preset, "method": "vit"}))
    return cells


def sweep(base: RunConfig, grid: SweepConfig, out_dir, threads: int = 1,
          threshold_on: str = "val") -> pd.DataFrame:
    """α × 层预设 网格：每格训练 + 评估一次，单格失败不影响其余"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    cells = sweep_cells(base, grid)
    for run in tqdm(cells, desc="sweep", disable=not sys.stderr.isatty()):
        name = f"{run.method_label}_a{run.alpha:g}_{run.layer_preset.replace('+', '-')}"
        run = run.model_copy(update={"out_dir": str(out_dir / name)})
        label = run.layer_preset if run.alpha > 0 else "none"
        try:
            result = train(run, threads=threads)
            report = evaluate_checkpoint(result.best_checkpoint, threshold_on=threshold_on, threads=threads)
            rows.append(sweep_row(run, report, label))
        except Exception as e:
            logger.error(f"扫描单元 {name} 失败: {e}")
            rows.append(sweep_row(run, None, label))

    table = pd.DataFrame([r.model_dump() for r in rows], columns=RESULT_COLUMNS)
    table.to_csv(out_dir / "results.csv", index=False)
    logger.info(f"扫描完成: {len(rows)} 个单元，结果写入 {out_dir / 'results.csv'}")
    return table


# 多种子对比
def _median(series: pd.Series) -> Optional[float]:
    values = series.dropna()
    return None if values.empty else float(values.median())


def seeded_run(base: RunConfig, seed: int) -> RunConfig:
    """同一份数据，换一个种子重新划分、初始化与打乱"""
    return base.model_copy(update={
        "seed": seed,
        "split_seed": seed,
        "model": base.model.model_copy(update={"seed": seed}),
    })


def summarize_comparison(table: pd.DataFrame, min_mass_ratio: float = 1.5) -> CompareSummary:
    """
    OFA 的 α 取验证 AUC 中位数最高的候选（并列取较小 α），
    再比较基线与该 α 在各种子上的测试 AUC 与器官注意力占比中位数。
    """
    table = table.copy()
    for column in ("alpha", "val_auc", "auc", "organ_attention_mass"):
        table[column] = pd.to_numeric(table[column], errors="coerce")
    baseline = table[table["method"] == "baseline"]
    ofa = table[table["method"] == "ofa"]
    if baseline.empty or ofa.empty:
        raise EmptySelectionError("对比结果中缺少基线或 OFA 行")

    val_by_alpha = ofa.groupby("alpha")["val_auc"].median().fillna(-np.inf)
    selected = float(val_by_alpha.idxmax())
    chosen = ofa[ofa["alpha"] == selected]

    baseline_mass = _median(baseline["organ_attention_mass"])
    ofa_mass = _median(chosen["organ_attention_mass"])
    ratio = None
    if baseline_mass is not None and ofa_mass is not None:
        ratio = ofa_mass / baseline_mass if baseline_mass > 0 else float("inf")
    baseline_auc = _median(baseline["auc"])
    ofa_auc = _median(chosen["auc"])
    return CompareSummary(
        selected_alpha=selected,
        n_seeds=int(table["seed"].nunique()),
        baseline_mass=baseline_mass,
        ofa_mass=ofa_mass,
        mass_ratio=ratio,
        baseline_auc=baseline_auc,
        ofa_auc=ofa_auc,
        min_mass_ratio=min_mass_ratio,
        mass_criterion_met=ratio is not None and ratio >= min_mass_ratio,
        auc_criterion_met=baseline_auc is not None and ofa_auc is not None and ofa_auc >= baseline_auc,
    )


def compare(base: RunConfig, grid: CompareConfig, out_dir, threads: int = 1,
            threshold_on: str = "val") -> CompareSummary:
    """每个种子训练 α=0 基线与各候选 α 的 OFA 模型，写 compare.csv 与 compare_summary.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in tqdm(grid.seeds, desc="compare", disable=not sys.stderr.isatty()):
        seeded = seeded_run(base, seed)
        arms = [seeded.model_copy(update={"alpha": 0.0, "layer_preset": "none", "method": "vit"})]
        arms += [seeded.model_copy(update={"alpha": float(a), "method": "vit"}) for a in grid.alphas]
        for run in arms:
            name = f"seed{seed}_{run.method_label}_a{run.alpha:g}"
            run = run.model_copy(update={"out_dir": str(out_dir / name)})
            result = train(run, threads=threads)
            report = evaluate_checkpoint(result.best_checkpoint, threshold_on=threshold_on, threads=threads)
            rows.append(CompareRow(
                seed=seed, method=run.method_label, alpha=run.alpha,
                layers=run.layer_preset if run.alpha > 0 else "none",
                val_auc=result.best_val_auc, auc=report.auc, f1=report.f1,
                organ_attention_mass=report.organ_attention_mass,
            ))

    table = pd.DataFrame([r.model_dump() for r in rows], columns=COMPARE_COLUMNS)
    table.to_csv(out_dir / "compare.csv", index=False)
    summary = summarize_comparison(table, grid.min_mass_ratio)
    (out_dir / "compare_summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"对比完成: α={summary.selected_alpha:g}, 注意力占比 {summary.baseline_mass} → "
                f"{summary.ofa_mass}（比值 {summary.mass_ratio}），"
                f"测试 AUC {summary.baseline_auc} → {summary.ofa_auc}")
    return summary


# 梯度检验
def grad_check_model(run: RunConfig, phantom: PhantomConfig, n_samples: int = 2,
                     epsilon: float = 1e-4, tolerance: float = 1e-4,
                     max_coordinates: int = 10_000) -> GradCheckReport:
    """在 n_samples 个合成样本上检验完整组合损失 L_cls + α·ΣL_OFA（batch 平均）"""
    grid = check_config(run.model)
    phantom = phantom.model_copy(update={"dims": tuple(run.model.input_dims), "count": max(n_samples, 2)})
    labels = assign_labels(phantom)
    samples = [synthesize(phantom, i, int(labels[i])) for i in range(n_samples)]
    cache = OpamCache()
    targets = [cache.get(s.mask, grid, run.min_organ_voxels, run.ofa_include_cls) for s in samples]
    selection = (resolve_layer_preset(run.layer_preset, run.model.layers)
                 if run.alpha > 0 else OfaLayerSelection(layers=()))
    template = init_params(run.model)

    def batch_loss(graph: Graph, leaves):
        total = None
        for sample, target in zip(samples, targets):
            loss = compute_sample_loss(
                template, sample.volume, sample.label, target, selection, run.alpha,
                run.ofa_head_mode, run.ofa_include_cls, graph=graph, bound=leaves,
            ).total
            total = loss if total is None else ag.add(total, loss)
        return ag.scale(total, 1.0 / len(samples))

    return ag.grad_check(batch_loss, template.tensors, epsilon=epsilon, tolerance=tolerance,
                         max_coordinates=max_coordinates, seed=run.seed)
