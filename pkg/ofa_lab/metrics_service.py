"""
评估指标服务：ROC AUC、Youden 阈值选择、Precision/Recall/F1

判定规则固定为 score ≥ threshold ⇒ 阳性。
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support, roc_auc_score

from .errors import OneClassOnlyError
from .schemas import MetricsReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel().astype(np.int64)
        if scores.shape != labels.shape:
            raise ValueError(f"scores 与 labels 长度不一致: {scores.size} vs {labels.size}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels 只能取 0/1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def require_both_classes(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise OneClassOnlyError(f"需要同时包含两类样本: 阳性 {self.n_pos}, 阴性 {self.n_neg}")


def roc_auc(scored: ScoredSet) -> float:
    """阳性得分高于阴性的样本对比例，并列记 0.5（与 ROC 曲线下面积相同）"""
    scored.require_both_classes()
    return float(roc_auc_score(scored.labels, scored.scores))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """相邻不同得分的中点，加上 ±∞ 哨兵"""
    unique = np.unique(scores)
    return np.concatenate([[-np.inf], (unique[:-1] + unique[1:]) / 2.0, [np.inf]])


def rates(scored: ScoredSet, thresholds) -> Tuple[np.ndarray, np.ndarray]:
    """各阈值下的 (TPR, FPR)"""
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    predicted = scored.scores[None, :] >= t[:, None]
    positive = scored.labels == 1
    tpr = (predicted & positive).sum(axis=1) / max(scored.n_pos, 1)
    fpr = (predicted & ~positive).sum(axis=1) / max(scored.n_neg, 1)
    return tpr, fpr


def youden_index(scored: ScoredSet, threshold: float) -> float:
    tpr, fpr = rates(scored, threshold)
    return float(tpr[0] - fpr[0])


def youden_threshold(scored: ScoredSet) -> float:
    """
    最大化 J = TPR − FPR 的阈值。
    J 并列时取灵敏度与特异度最接近的一个，仍并列则取较小阈值。
    """
    scored.require_both_classes()
    thresholds = candidate_thresholds(scored.scores)
    tpr, fpr = rates(scored, thresholds)
    j = tpr - fpr
    best = np.isclose(j, j.max(), rtol=0.0, atol=1e-12)
    imbalance = np.abs(tpr - (1.0 - fpr))
    order = np.lexsort((thresholds, imbalance))  # 先按失衡度，再按阈值
    choice = next(i for i in order if best[i])
    return float(thresholds[choice])


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def prf1(scored: ScoredSet, threshold: float, threshold_source: str = "val") -> MetricsReport:
    predicted = (scored.scores >= threshold).astype(np.int64)
    tn, fp, fn, tp = (int(c) for c in confusion_matrix(scored.labels, predicted, labels=[0, 1]).ravel())
    precision, recall, f1, _ = precision_recall_fscore_support(
        scored.labels, predicted, labels=[1], average=None, zero_division=0,
    )
    auc = roc_auc(scored) if scored.n_pos and scored.n_neg else None
    return MetricsReport(
        auc=auc, threshold=float(threshold), precision=float(precision[0]), recall=float(recall[0]),
        f1=float(f1[0]), tp=tp, fp=fp, tn=tn, fn=fn,
        threshold_source=threshold_source,
    )


def evaluate_protocol(val: ScoredSet, test: ScoredSet, threshold_on: str = "val") -> MetricsReport:
    """在验证集上选 Youden 阈值，原样用于测试集；threshold_on='test' 时阈值直接在测试集上选"""
    if threshold_on not in ("val", "test"):
        raise ValueError(f"threshold_on 只能是 val 或 test: {threshold_on}")
    source = val if threshold_on == "val" else test
    threshold = youden_threshold(source)
    report = prf1(test, threshold, threshold_source=threshold_on)
    assert report.threshold == threshold
    logger.info(f"测试集 AUC={report.auc}, 阈值={threshold:.4f}（来自{threshold_on}集）, F1={report.f1:.3f}")
    return report


def scored_set(scores: Sequence[float], labels: Sequence[int]) -> ScoredSet:
    return ScoredSet(scores=np.asarray(scores), labels=np.asarray(labels))
