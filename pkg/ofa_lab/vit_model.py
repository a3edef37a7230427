"""
3D Vision Transformer 分类器

token 0 为 CLS，token t (1..N) 对应 PatchGrid 中第 t−1 个 patch。
每层为 pre-norm 多头自注意力 + pre-norm MLP，前向时保留每层每头的注意力矩阵。
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import DTensor, Graph
from .errors import (
    BadConfigError, BadHeaderError, BadLayerError, ConfigError, DimMismatchError,
    PayloadMismatchError, VolumeIOError,
)
from .schemas import VitConfig
from .volume_service import PatchGrid, Volume, partition, patchify

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "OFACKPT1"
INIT_STD = 0.02


@dataclass
class VitParams:
    config: VitConfig
    tensors: Dict[str, np.ndarray]

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "VitParams":
        return VitParams(config=self.config.model_copy(), tensors={k: v.copy() for k, v in self.tensors.items()})


@dataclass
class AttentionStack:
    """layers[l][h] 为第 l 层第 h 头的 (N+1)×(N+1) 注意力矩阵"""
    layers: List[List[DTensor]]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_heads(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    def as_array(self) -> np.ndarray:
        """(L, H, N+1, N+1) 数组"""
        return np.stack([np.stack([a.values for a in heads]) for heads in self.layers])


@dataclass
class ForwardPass:
    logit: DTensor
    attention: AttentionStack
    patch_embeddings: DTensor  # 位置编码之前的 patch token
    graph: Graph


def check_config(config: VitConfig) -> PatchGrid:
    """校验 ViT 配置，返回对应的 patch 网格"""
    if config.layers < 1 or config.heads < 1:
        raise BadConfigError(f"层数与头数至少为1: L={config.layers}, H={config.heads}")
    if config.embed_dim < 1 or config.embed_dim % config.heads != 0:
        raise BadConfigError(f"embed_dim={config.embed_dim} 不能被 heads={config.heads} 整除")
    if config.n_classes != 1:
        raise BadConfigError("二分类模型只支持 n_classes=1")
    if config.mlp_dim < 1:
        raise BadConfigError(f"mlp_ratio 过小: {config.mlp_ratio}")
    try:
        return partition(config.input_dims, config.patch_size)
    except ConfigError as e:
        raise BadConfigError(f"输入尺寸无法划分: {e}") from e


def param_shapes(config: VitConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(名称, 形状, 初始化方式)，顺序固定以保证同一种子得到相同参数"""
    grid = check_config(config)
    d, n_tokens, hidden = config.embed_dim, grid.n + 1, config.mlp_dim
    specs = [
        ("patch_embed.w", (grid.voxels_per_patch, d), "normal"),
        ("patch_embed.b", (d,), "zeros"),
        ("cls_token", (1, d), "normal"),
        ("pos_embed", (n_tokens, d), "normal"),
    ]
    for l in range(config.layers):
        p = f"blocks.{l}"
        specs += [
            (f"{p}.norm1.gamma", (d,), "ones"),
            (f"{p}.norm1.beta", (d,), "zeros"),
        ]
        for proj in ("q", "k", "v", "out"):
            specs += [
                (f"{p}.attn.{proj}.w", (d, d), "normal"),
                (f"{p}.attn.{proj}.b", (d,), "zeros"),
            ]
        specs += [
            (f"{p}.norm2.gamma", (d,), "ones"),
            (f"{p}.norm2.beta", (d,), "zeros"),
            (f"{p}.mlp.fc1.w", (d, hidden), "normal"),
            (f"{p}.mlp.fc1.b", (hidden,), "zeros"),
            (f"{p}.mlp.fc2.w", (hidden, d), "normal"),
            (f"{p}.mlp.fc2.b", (d,), "zeros"),
        ]
    specs += [
        ("norm.gamma", (d,), "ones"),
        ("norm.beta", (d,), "zeros"),
        ("head.w", (d, 1), "normal"),
        ("head.b", (1,), "zeros"),
    ]
    return specs


def init_params(config: VitConfig) -> VitParams:
    """权重取截断正态（±2σ，σ=0.02），偏置为 0，LayerNorm 增益为 1"""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape, kind in param_shapes(config):
        if kind == "normal":
            tensors[name] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
        elif kind == "ones":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    params = VitParams(config=config, tensors=tensors)
    logger.info(f"初始化 3D ViT: L={config.layers}, H={config.heads}, "
                f"dim={config.embed_dim}, 参数量 {params.n_parameters}")
    return params


def bind(params: VitParams, graph: Graph, requires_grad: bool = False) -> Dict[str, DTensor]:
    return {k: graph.tensor(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def _linear(x: DTensor, p: Dict[str, DTensor], prefix: str) -> DTensor:
    return ag.add(ag.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def _attention(x: DTensor, p: Dict[str, DTensor], prefix: str, heads: int,
               head_dim: int) -> Tuple[DTensor, List[DTensor]]:
    q = _linear(x, p, f"{prefix}.q")
    k = _linear(x, p, f"{prefix}.k")
    v = _linear(x, p, f"{prefix}.v")
    scale = 1.0 / np.sqrt(head_dim)
    maps, outs = [], []
    for h in range(heads):
        cols = (slice(None), slice(h * head_dim, (h + 1) * head_dim))
        qh, kh, vh = ag.getitem(q, cols), ag.getitem(k, cols), ag.getitem(v, cols)
        scores = ag.scale(ag.matmul(qh, ag.transpose(kh)), scale)
        attn = ag.row_softmax(scores)
        maps.append(attn)
        outs.append(ag.matmul(attn, vh))
    merged = outs[0] if heads == 1 else ag.concat(outs, axis=1)
    return _linear(merged, p, f"{prefix}.out"), maps


def embed_patches(params: VitParams, volume: Volume, graph: Graph,
                  bound: Dict[str, DTensor]) -> DTensor:
    """把每个 patch 块展平后线性投影到 embed_dim，得到 (N, D)"""
    config = params.config
    if tuple(volume.dims) != tuple(config.input_dims):
        raise DimMismatchError(f"输入尺寸 {volume.dims} 与模型配置 {config.input_dims} 不一致")
    grid = partition(config.input_dims, config.patch_size)
    tokens = graph.tensor(patchify(volume.data.astype(np.float64), grid))
    return _linear(tokens, bound, "patch_embed")


def forward(params: VitParams, volume: Volume, graph: Optional[Graph] = None,
            requires_grad: bool = False,
            bound: Optional[Dict[str, DTensor]] = None) -> ForwardPass:
    config = params.config
    graph = graph or Graph()
    p = bound if bound is not None else bind(params, graph, requires_grad)

    patches = embed_patches(params, volume, graph, p)
    x = ag.add(ag.concat([p["cls_token"], patches], axis=0), p["pos_embed"])

    stack = []
    for l in range(config.layers):
        prefix = f"blocks.{l}"
        h = ag.layer_norm(x, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"])
        attn_out, maps = _attention(h, p, f"{prefix}.attn", config.heads, config.head_dim)
        stack.append(maps)
        x = ag.add(x, attn_out)
        h = ag.layer_norm(x, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"])
        h = _linear(ag.gelu(_linear(h, p, f"{prefix}.mlp.fc1")), p, f"{prefix}.mlp.fc2")
        x = ag.add(x, h)

    cls = ag.getitem(x, (slice(0, 1), slice(None)))
    cls = ag.layer_norm(cls, p["norm.gamma"], p["norm.beta"])
    logit = ag.reshape(_linear(cls, p, "head"), ())
    return ForwardPass(logit=logit, attention=AttentionStack(layers=stack),
                       patch_embeddings=patches, graph=graph)


def predict_logit(params: VitParams, volume: Volume) -> float:
    """推理路径：只需要体数据"""
    return forward(params, volume).logit.item()


def mean_head_attention(attn: AttentionStack, layer: int) -> DTensor:
    """第 layer 层各头注意力的逐元素平均"""
    if not 0 <= layer < attn.n_layers:
        raise BadLayerError(f"层索引 {layer} 超出 [0, {attn.n_layers})")
    heads = attn.layers[layer]
    if len(heads) == 1:
        return heads[0]
    total = heads[0]
    for a in heads[1:]:
        total = ag.add(total, a)
    return ag.scale(total, 1.0 / len(heads))


# 检查点
def save_checkpoint(path: Union[str, Path], params: VitParams,
                    extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None):
    """
    文本清单 + 小端 float64 数据：
    OFACKPT1 / config <json> / meta <json> / tensor <name> <shape> <offset> ... / end
    """
    tensors = dict(params.tensors)
    for k, v in (extra or {}).items():
        tensors[f"extra:{k}"] = np.asarray(v, dtype=np.float64)
    lines = [
        CHECKPOINT_MAGIC,
        f"config {params.config.model_dump_json()}",
        f"meta {json.dumps(meta or {}, sort_keys=True)}",
    ]
    offset, chunks = 0, []
    for name, value in tensors.items():
        shape = ",".join(str(s) for s in value.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        data = np.ascontiguousarray(value, dtype="<f8").tobytes()
        chunks.append(data)
        offset += len(data)
    lines.append("end")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(("\n".join(lines) + "\n").encode("utf-8"))
            for data in chunks:
                f.write(data)
    except OSError as e:
        raise VolumeIOError(f"保存检查点失败 {path}: {e}") from e


def load_checkpoint(path: Union[str, Path]) -> Tuple[VitParams, Dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f"读取检查点失败 {path}: {e}") from e
    marker = raw.find(b"\nend\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or marker < 0:
        raise BadHeaderError(f"不是有效的检查点文件: {path}")
    header = raw[:marker].decode("utf-8").split("\n")
    payload = raw[marker + len(b"\nend\n"):]

    config, meta, entries = None, {}, []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = VitConfig.model_validate_json(rest)
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, shape, offset = rest.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            entries.append((name, dims, int(offset)))
        else:
            raise BadHeaderError(f"未知清单行: {line}")
    if config is None:
        raise BadHeaderError("检查点缺少 config 行")

    tensors, extra = {}, {}
    for name, dims, offset in entries:
        count = int(np.prod(dims)) if dims else 1
        end = offset + count * 8
        if end > len(payload):
            raise PayloadMismatchError(f"张量 {name} 超出数据区")
        value = np.frombuffer(payload[offset:end], dtype="<f8").reshape(dims).astype(np.float64)
        if name.startswith("extra:"):
            extra[name[len("extra:"):]] = value
        else:
            tensors[name] = value

    expected = [name for name, _, _ in param_shapes(config)]
    if list(tensors) != expected:
        raise BadHeaderError("检查点张量目录与配置不一致")
    return VitParams(config=config, tensors=tensors), extra, meta
