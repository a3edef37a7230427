from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Tuple


# 模型与训练配置
class VitConfig(BaseModel):
    input_dims: Tuple[int, int, int] = (24, 24, 24)
    patch_size: Tuple[int, int, int] = (8, 8, 8)
    embed_dim: int = 64
    layers: int = 4  # 自注意力层数 L
    heads: int = 4  # 注意力头数 H
    mlp_ratio: float = 2.0
    n_classes: int = 1  # 二分类只输出一个 logit
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class RunConfig(BaseModel):
    model: VitConfig = Field(default_factory=VitConfig)
    manifest: Optional[str] = None
    split_seed: int = 0
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    # OFA 相关
    alpha: float = Field(default=1000.0, ge=0)
    layer_preset: str = "first+middle+last"
    method: Literal["vit", "sbc"] = "vit"
    ofa_head_mode: Literal["mean", "per_head"] = "mean"
    ofa_include_cls: bool = False
    min_organ_voxels: int = Field(default=1, ge=1)
    sbc_margin: int = Field(default=2, ge=0)

    # 优化器
    lr: float = Field(default=1e-5, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=50, ge=1)

    # 数据增强（默认关闭）
    augment_flip: bool = False
    augment_intensity: bool = False

    # 强度归一化：窗口线性映射到 [0, 1]
    normalize: bool = False
    normalize_window: Tuple[float, float] = (0.0, 1.0)

    threads: int = Field(default=1, ge=1)
    out_dir: str = "runs/default"
    seed: int = 0

    @field_validator("split_ratios")
    @classmethod
    def _ratios_sum_to_one(cls, v):
        if any(r < 0 for r in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"划分比例必须非负且和为1: {v}")
        return v

    @field_validator("normalize_window")
    @classmethod
    def _window_ordered(cls, v):
        if not v[1] > v[0]:
            raise ValueError(f"归一化窗口上界必须大于下界: {v}")
        return v

    @property
    def method_label(self) -> str:
        """结果表中的方法名"""
        if self.method == "sbc":
            return "sbc"
        return "ofa" if self.alpha > 0 else "baseline"


class PhantomConfig(BaseModel):
    dims: Tuple[int, int, int] = (24, 24, 24)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ_radius: Tuple[float, float] = (5.0, 8.0)
    lesion_radius: Tuple[float, float] = (2.0, 3.0)
    background_level: float = 0.2
    organ_level: float = 0.6
    lesion_delta: float = 0.3  # 病灶比器官暗多少
    distractor_count: int = Field(default=3, ge=0)
    distractor_delta: float = 0.3  # 干扰物对比度，与病灶相当
    noise_std: float = Field(default=0.1, ge=0)
    class_balance: float = 0.5
    count: int = Field(default=280, ge=1)
    margin: int = Field(default=1, ge=0)
    seed: int = 0

    @field_validator("organ_radius", "lesion_radius")
    @classmethod
    def _radius_range(cls, v):
        if v[0] <= 0 or v[1] < v[0]:
            raise ValueError(f"半径范围无效: {v}")
        return v

    @field_validator("class_balance")
    @classmethod
    def _balance_open_interval(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError(f"类别比例必须在(0,1)内: {v}")
        return v


class SweepConfig(BaseModel):
    alphas: List[float] = Field(default_factory=lambda: [900.0, 1000.0, 1100.0])
    presets: List[str] = Field(default_factory=lambda: ["first", "first+last", "first+middle+last"])
    include_baseline: bool = False
    include_sbc: bool = False


class CompareConfig(BaseModel):
    """多种子对比：α=0 基线 vs OFA（α 从候选中按验证 AUC 中位数选出）"""
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    alphas: List[float] = Field(default_factory=lambda: [10.0, 100.0, 1000.0])
    min_mass_ratio: float = Field(default=1.5, gt=0)

    @field_validator("seeds", "alphas")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("对比的种子与 α 候选都不能为空")
        return v

    @field_validator("alphas")
    @classmethod
    def _positive_alphas(cls, v):
        if any(a <= 0 for a in v):
            raise ValueError(f"OFA 的 α 候选必须为正: {v}")
        return v


class RolloutConfig(BaseModel):
    slices: List[int] = Field(default_factory=list)  # 需要导出 PGM 的轴向切片


class ExperimentConfig(BaseModel):
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    train: RunConfig = Field(default_factory=RunConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    rollout: RolloutConfig = Field(default_factory=RolloutConfig)


# 数据清单
class ManifestEntry(BaseModel):
    volume: str
    mask: Optional[str] = None
    label: int = Field(ge=0, le=1)


# 输出记录
class LossBreakdown(BaseModel):
    l_classification: float
    l_ofa_per_layer: Dict[int, float] = Field(default_factory=dict)
    l_ofa_total: float = 0.0
    alpha: float = 0.0
    l_final: float


class MetricsReport(BaseModel):
    auc: Optional[float] = None
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold_source: str = "val"
    organ_attention_mass: Optional[float] = None  # 测试集 rollout 器官注意力占比均值


class GradCheckReport(BaseModel):
    max_rel_error: float
    worst_param: Optional[str] = None
    n_checked: int
    n_total: int
    epsilon: float
    tolerance: float
    passed: bool


class EpochLog(BaseModel):
    epoch: int
    split: str
    l_cls: float
    l_ofa_total: Optional[float] = None
    auc: Optional[float] = None


class SweepRow(BaseModel):
    method: str
    alpha: float
    layers: str
    auc: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None


class TrainResult(BaseModel):
    out_dir: str
    best_checkpoint: str
    last_checkpoint: str
    best_epoch: int
    best_val_auc: Optional[float] = None
    split: Dict[str, List[int]]


class BayesCheckReport(BaseModel):
    oracle_auc: float
    background_auc: float
    learnable: bool


class RolloutRecord(BaseModel):
    organ_attention_mass: Optional[float] = None
    cls_to_patch: List[float]
    heatmap: str
    slices: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _mass_in_unit_interval(self):
        m = self.organ_attention_mass
        if m is not None and not -1e-12 <= m <= 1 + 1e-12:
            raise ValueError(f"器官注意力占比越界: {m}")
        return self


class CompareRow(BaseModel):
    seed: int
    method: str
    alpha: float
    layers: str
    val_auc: Optional[float] = None
    auc: Optional[float] = None
    f1: Optional[float] = None
    organ_attention_mass: Optional[float] = None


class CompareSummary(BaseModel):
    selected_alpha: float
    n_seeds: int
    baseline_mass: Optional[float] = None
    ofa_mass: Optional[float] = None
    mass_ratio: Optional[float] = None
    baseline_auc: Optional[float] = None
    ofa_auc: Optional[float] = None
    min_mass_ratio: float
    mass_criterion_met: bool
    auc_criterion_met: bool
