"""
最小反向模式自动微分引擎

只实现 ViT 与损失函数需要的算子，全部使用 float64。
每个 Graph 按创建顺序记录节点，该顺序即拓扑序；backward 逆序遍历一次。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from .errors import NonDeterministicError, NonFiniteError, ShapeMismatchError
from .schemas import GradCheckReport

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(eq=False)
class DTensor:
    values: np.ndarray
    requires_grad: bool = False
    graph: Optional["Graph"] = field(default=None, repr=False)
    inputs: Tuple["DTensor", ...] = field(default=(), repr=False)
    backward_rule: Optional[BackwardRule] = field(default=None, repr=False)
    op: str = "leaf"
    name: Optional[str] = None
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() 需要单元素张量，得到 {self.shape}")
        return float(self.values.reshape(()))


class Graph:
    """单线程构建与反传的计算图"""

    def __init__(self):
        self.nodes: List[DTensor] = []

    def tensor(self, values, requires_grad: bool = False, name: Optional[str] = None) -> DTensor:
        array = np.array(values, dtype=np.float64)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"叶子张量 {name or ''} 含非有限值")
        node = DTensor(values=array, requires_grad=requires_grad, graph=self, name=name)
        self.nodes.append(node)
        return node

    def record(self, op: str, values: np.ndarray, inputs: Sequence[DTensor],
               rule: BackwardRule) -> DTensor:
        if not np.isfinite(values).all():
            raise NonFiniteError(f"{op} 输出含 NaN/Inf")
        requires_grad = any(t.requires_grad for t in inputs)
        node = DTensor(
            values=values,
            requires_grad=requires_grad,
            graph=self,
            inputs=tuple(inputs),
            backward_rule=rule if requires_grad else None,
            op=op,
        )
        self.nodes.append(node)
        return node

    def backward(self, root: DTensor):
        """从标量 root 反传，梯度写入各节点的 .grad（每次调用前清零）"""
        if root.graph is not self:
            raise ShapeMismatchError("root 不属于该计算图")
        if root.values.size != 1:
            raise ShapeMismatchError(f"只能从标量反传，得到 {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_rule is None:
                continue
            for inp, g in zip(node.inputs, node.backward_rule(node.grad)):
                if g is None or not inp.requires_grad:
                    continue
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"{node.op} 反传梯度含 NaN/Inf")
                inp.grad = g if inp.grad is None else inp.grad + g


def _graph_of(*tensors: DTensor) -> Graph:
    graphs = {id(t.graph): t.graph for t in tensors}
    if len(graphs) != 1 or None in graphs.values():
        raise ShapeMismatchError("算子输入必须属于同一个计算图")
    return tensors[0].graph


# 核心算子
def matmul(a: DTensor, b: DTensor) -> DTensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _graph_of(a, b).record(
        "matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g)
    )


def add(a: DTensor, b: DTensor) -> DTensor:
    """同形状相加，或 (T,D) + (D,) 的逐行偏置"""
    if a.shape == b.shape:
        rule = lambda g: (g, g)
    elif a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        rule = lambda g: (g, g.sum(axis=0))
    else:
        raise ShapeMismatchError(f"add 形状不匹配: {a.shape} + {b.shape}")
    return _graph_of(a, b).record("add", a.values + b.values, (a, b), rule)


def scale(a: DTensor, c: float) -> DTensor:
    c = float(c)
    return a.graph.record("scale", a.values * c, (a,), lambda g: (g * c,))


def row_softmax(a: DTensor) -> DTensor:
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"row_softmax 需要二维输入: {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return a.graph.record("row_softmax", y, (a,), rule)


def layer_norm(x: DTensor, gamma: DTensor, beta: DTensor, eps: float = 1e-5) -> DTensor:
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError(f"layer_norm 形状不匹配: {x.shape}, {gamma.shape}, {beta.shape}")
    d = x.shape[1]
    mu = x.values.mean(axis=1, keepdims=True)
    centered = x.values - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    gv = gamma.values

    def rule(g):
        dxhat = g * gv
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _graph_of(x, gamma, beta).record(
        "layer_norm", xhat * gv + beta.values, (x, gamma, beta), rule
    )


def gelu(a: DTensor) -> DTensor:
    """精确 GELU：x·Φ(x)"""
    x = a.values
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return a.graph.record("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def reshape(a: DTensor, shape: Tuple[int, ...]) -> DTensor:
    source = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape 失败: {source} → {shape}") from e
    return a.graph.record("reshape", out, (a,), lambda g: (g.reshape(source),))


def transpose(a: DTensor) -> DTensor:
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"transpose 只支持二维: {a.shape}")
    return a.graph.record("transpose", a.values.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    if not tensors:
        raise ShapeMismatchError("concat 至少需要一个输入")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat 形状不匹配: {[t.shape for t in tensors]}") from e
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _graph_of(*tensors).record(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis))
    )


def getitem(a: DTensor, key) -> DTensor:
    """基本切片（不支持高级索引，保证切片互不重叠）"""
    source = a.shape

    def rule(g):
        full = np.zeros(source)
        full[key] = g
        return (full,)

    return a.graph.record("getitem", np.array(a.values[key]), (a,), rule)


def mean(a: DTensor) -> DTensor:
    size = a.values.size
    source = a.shape
    return a.graph.record(
        "mean", np.array(a.values.mean()), (a,), lambda g: (np.full(source, g / size),)
    )


def mse(a: DTensor, b: DTensor) -> DTensor:
    """均方误差 (1/n)·Σ(a−b)²"""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mse 形状不匹配: {a.shape} vs {b.shape}")
    diff = a.values - b.values
    size = diff.size

    def rule(g):
        da = (2.0 / size) * g * diff
        return da, -da

    return _graph_of(a, b).record("mse", np.array((diff * diff).mean()), (a, b), rule)


def bce_with_logits(logit: DTensor, label: float) -> DTensor:
    """数值稳定的二元交叉熵：max(x,0) − x·y + log(1+e^{−|x|})"""
    if logit.values.size != 1:
        raise ShapeMismatchError(f"bce_with_logits 需要单个 logit: {logit.shape}")
    x = float(logit.values.reshape(()))
    y = float(label)
    value = max(x, 0.0) - x * y + np.log1p(np.exp(-abs(x)))
    source = logit.shape
    p = expit(x)
    return logit.graph.record(
        "bce_with_logits", np.array(value), (logit,),
        lambda g: (np.full(source, g * (p - y)),),
    )


# 梯度检验
GraphFunction = Callable[[Graph, Dict[str, DTensor]], DTensor]


def _evaluate(f: GraphFunction, params: Dict[str, np.ndarray]) -> float:
    graph = Graph()
    leaves = {k: graph.tensor(v, name=k) for k, v in params.items()}
    return f(graph, leaves).item()


def analytic_gradients(f: GraphFunction, params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    graph = Graph()
    leaves = {k: graph.tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = f(graph, leaves)
    graph.backward(out)
    grads = {
        k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values))
        for k, leaf in leaves.items()
    }
    return out.item(), grads


def grad_check(f: GraphFunction, params: Dict[str, np.ndarray], epsilon: float = 1e-5,
               tolerance: float = 1e-6, max_coordinates: int = 10_000,
               seed: int = 0) -> GradCheckReport:
    """
    中心差分 (f(x+ε)−f(x−ε))/2ε 与解析梯度比较

    相对误差 |a−n| / max(1e-8, |a|+|n|)；坐标数超过 max_coordinates 时随机抽样。
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    first, second = _evaluate(f, params), _evaluate(f, params)
    if first != second:
        raise NonDeterministicError(f"两次前向结果不一致: {first!r} vs {second!r}")

    _, grads = analytic_gradients(f, params)

    coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    total = len(coords)
    if total > max_coordinates:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(total, size=max_coordinates, replace=False))
        coords = [coords[i] for i in picked]

    worst, worst_name = 0.0, None
    for name, i in coords:
        base = params[name]
        shifted = dict(params)
        plus = base.copy()
        plus.flat[i] += epsilon
        shifted[name] = plus
        f_plus = _evaluate(f, shifted)
        minus = base.copy()
        minus.flat[i] -= epsilon
        shifted[name] = minus
        f_minus = _evaluate(f, shifted)

        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(grads[name].flat[i])
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        if rel > worst:
            worst, worst_name = rel, f"{name}[{i}]"

    logger.info(f"梯度检验: {len(coords)}/{total} 个坐标，最大相对误差 {worst:.3e}")
    return GradCheckReport(
        max_rel_error=worst,
        worst_param=worst_name,
        n_checked=len(coords),
        n_total=total,
        epsilon=epsilon,
        tolerance=tolerance,
        passed=worst < tolerance,
    )
