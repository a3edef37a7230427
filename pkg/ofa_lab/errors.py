"""
统一异常定义

ConfigError 及其子类属于配置/输入校验错误（CLI 返回码 2），
其余 OfaError 属于运行时错误（CLI 返回码 1）。
"""


class OfaError(Exception):
    """所有 OFA Lab 异常的基类"""


class ConfigError(OfaError, ValueError):
    """配置或输入校验失败"""


# 体数据与网格
class ZeroDimError(ConfigError):
    pass


class NonDivisibleError(ConfigError):
    def __init__(self, dim: int, size: int, patch: int):
        super().__init__(f"第{dim}维大小 {size} 不能被 patch 边长 {patch} 整除")
        self.dim = dim


class DimMismatchError(ConfigError):
    pass


class GridMismatchError(ConfigError):
    pass


class InvalidVoxelError(ConfigError):
    """体数据含 NaN/Inf，或标签超出取值范围"""


class EmptyMaskError(OfaError):
    pass


class BadHeaderError(OfaError):
    pass


class PayloadMismatchError(OfaError):
    pass


class VolumeIOError(OfaError):
    pass


# 自动微分
class ShapeMismatchError(OfaError):
    pass


class NonFiniteError(OfaError):
    pass


class NonDeterministicError(OfaError):
    pass


# 模型与损失
class BadConfigError(ConfigError):
    pass


class BadLayerError(ConfigError):
    pass


class SizeMismatchError(OfaError):
    pass


class EmptySelectionError(ConfigError):
    pass


# 训练
class NonFiniteGradError(OfaError):
    pass


class ClassTooSmallError(ConfigError):
    pass


class MissingMaskError(ConfigError):
    pass


class ManifestError(ConfigError):
    pass


# 评估与可视化
class OneClassOnlyError(OfaError):
    pass


class EmptyStackError(OfaError):
    pass


# 合成数据
class ConfigInfeasibleError(ConfigError):
    pass
