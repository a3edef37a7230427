"""
损失函数服务：OFA 损失、分类损失与组合目标 L_final = L_cls + α·Σ L_OFA
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import DTensor, Graph
from .errors import (
    BadConfigError, BadLayerError, EmptySelectionError, MissingMaskError, SizeMismatchError,
)
from .opam_service import OpamTarget
from .schemas import LossBreakdown
from .vit_model import VitParams, forward, mean_head_attention
from .volume_service import Volume

logger = logging.getLogger(__name__)

LAYER_PRESETS = ("first", "first+last", "first+middle+last")


@dataclass(frozen=True)
class OfaLayerSelection:
    """接受 OFA 监督的层索引（有序、唯一）"""
    layers: Tuple[int, ...]
    preset: str = "custom"

    @property
    def label(self) -> str:
        return self.preset if self.preset != "custom" else "+".join(str(l) for l in self.layers)


def middle_layer(n_layers: int) -> int:
    return (n_layers - 1) // 2


def resolve_layer_preset(preset: str, n_layers: int) -> OfaLayerSelection:
    """
    预设名解析为层索引：first / middle / last 用 '+' 组合，另有 all、none，
    或逗号分隔的显式索引 "0,3"
    """
    if n_layers < 1:
        raise BadLayerError(f"层数必须为正: {n_layers}")
    name = preset.strip().lower()
    named = {"first": 0, "middle": middle_layer(n_layers), "last": n_layers - 1}
    if name == "none":
        layers = []
    elif name == "all":
        layers = list(range(n_layers))
    elif all(part in named for part in name.split("+")):
        layers = [named[part] for part in name.split("+")]
    else:
        try:
            layers = [int(part) for part in name.split(",") if part.strip()]
        except ValueError as e:
            raise BadLayerError(f"无法识别的层预设: {preset}") from e
        name = "custom"
    for l in layers:
        if not 0 <= l < n_layers:
            raise BadLayerError(f"层索引 {l} 超出 [0, {n_layers})")
    return OfaLayerSelection(layers=tuple(sorted(set(layers))), preset=name)


def ofa_loss(attn_layer: DTensor, target: OpamTarget, include_cls: bool = False) -> DTensor:
    """
    L_OFA = (1/N²)·Σ_ij (M'_ij − A_pp,ij)²

    A_pp 为去掉 CLS 行列后的 N×N patch-patch 子块，不做行重归一化。
    include_cls=True 时直接与 (N+1)×(N+1) 目标比较。
    """
    tokens = attn_layer.shape[0]
    expected = tokens if include_cls else tokens - 1
    if target.n != expected or attn_layer.shape != (tokens, tokens):
        raise SizeMismatchError(f"注意力矩阵 {attn_layer.shape} 与目标 N={target.n} 不匹配")
    block = attn_layer if include_cls else ag.getitem(attn_layer, (slice(1, None), slice(1, None)))
    return ag.mse(block, attn_layer.graph.tensor(target.t))


def classification_loss(logit: DTensor, label: int) -> DTensor:
    return ag.bce_with_logits(logit, float(label))


def final_loss(l_cls: DTensor, l_ofa_per_layer: Dict[int, DTensor],
               alpha: float) -> Tuple[DTensor, LossBreakdown]:
    if alpha < 0:
        raise BadConfigError(f"alpha 必须非负: {alpha}")
    if alpha > 0 and not l_ofa_per_layer:
        raise EmptySelectionError("alpha > 0 时至少需要一个 OFA 监督层")

    if l_ofa_per_layer:
        layers = sorted(l_ofa_per_layer)
        ofa_total = l_ofa_per_layer[layers[0]]
        for l in layers[1:]:
            ofa_total = ag.add(ofa_total, l_ofa_per_layer[l])
        total = ag.add(l_cls, ag.scale(ofa_total, alpha))
        ofa_value = ofa_total.item()
    else:
        total, ofa_value = l_cls, 0.0

    breakdown = LossBreakdown(
        l_classification=l_cls.item(),
        l_ofa_per_layer={l: t.item() for l, t in sorted(l_ofa_per_layer.items())},
        l_ofa_total=ofa_value,
        alpha=alpha,
        l_final=total.item(),
    )
    return total, breakdown


def layer_ofa_losses(attention, selection: OfaLayerSelection, target: OpamTarget,
                     head_mode: str = "mean", include_cls: bool = False) -> Dict[int, DTensor]:
    """对选中的各层计算 OFA 损失；per_head 模式对每头单独计算后取平均"""
    losses = {}
    for l in selection.layers:
        if head_mode == "per_head":
            heads = attention.layers[l]
            per_head = [ofa_loss(a, target, include_cls) for a in heads]
            total = per_head[0]
            for t in per_head[1:]:
                total = ag.add(total, t)
            losses[l] = ag.scale(total, 1.0 / len(heads)) if len(heads) > 1 else total
        else:
            losses[l] = ofa_loss(mean_head_attention(attention, l), target, include_cls)
    return losses


@dataclass
class SampleLoss:
    total: DTensor
    breakdown: LossBreakdown
    logit: float
    graph: Graph


def compute_sample_loss(params: VitParams, volume: Volume, label: int,
                        target: Optional[OpamTarget], selection: OfaLayerSelection,
                        alpha: float, head_mode: str = "mean", include_cls: bool = False,
                        graph: Optional[Graph] = None, bound=None,
                        requires_grad: bool = True) -> SampleLoss:
    """单个样本的前向 + 组合损失；alpha = 0 时完全跳过 OFA 分支"""
    graph = graph or Graph()
    fp = forward(params, volume, graph=graph, requires_grad=requires_grad, bound=bound)
    l_cls = classification_loss(fp.logit, label)
    ofa = {}
    if alpha > 0:
        if target is None:
            raise MissingMaskError("alpha > 0 时需要 OPAM 目标")
        ofa = layer_ofa_losses(fp.attention, selection, target, head_mode, include_cls)
    total, breakdown = final_loss(l_cls, ofa, alpha)
    return SampleLoss(total=total, breakdown=breakdown, logit=fp.logit.item(), graph=graph)


def check_breakdown(breakdown: LossBreakdown, tol: float = 1e-12) -> bool:
    expected = breakdown.l_classification + breakdown.alpha * breakdown.l_ofa_total
    return bool(np.isclose(breakdown.l_final, expected, rtol=0, atol=tol * max(1.0, abs(expected))))
