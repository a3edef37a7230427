"""
Adam 优化器（带偏差修正）
"""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import NonFiniteGradError, ShapeMismatchError


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)  # 一阶矩
    v: Dict[str, np.ndarray] = field(default_factory=dict)  # 二阶矩

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray], lr: float = 1e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        )

    def to_tensors(self) -> Dict[str, np.ndarray]:
        """检查点用的扁平张量表"""
        out = {"adam.t": np.array(float(self.t))}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], names, lr: float, beta1: float,
                     beta2: float, eps: float) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            t=int(tensors["adam.t"]),
            m={k: tensors[f"adam.m.{k}"].copy() for k in names},
            v={k: tensors[f"adam.v.{k}"].copy() for k in names},
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    m ← β1·m + (1−β1)·g；v ← β2·v + (1−β2)·g²
    θ ← θ − lr·m̂/(√v̂ + ε)，m̂、v̂ 为偏差修正后的矩
    """
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ShapeMismatchError(f"梯度 {k} 与参数形状不一致")
        if not np.isfinite(g).all():
            raise NonFiniteGradError(f"参数 {k} 的梯度含 NaN/Inf")

    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(theta)
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v

    return new_params, AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        t=t, m=new_m, v=new_v,
    )
