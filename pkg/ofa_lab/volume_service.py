"""
体数据服务：Volume / SegMask 容器、3D patch 划分、VVOL 文件读写、
以及基于分割的裁剪（SBC）基线变换
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import (
    BadHeaderError, ConfigError, DimMismatchError, EmptyMaskError, InvalidVoxelError,
    NonDivisibleError, PayloadMismatchError, VolumeIOError, ZeroDimError,
)

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]
PathLike = Union[str, Path]

VVOL_MAGIC = "VVOL1"
VMAT_MAGIC = "VMAT1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Volume:
    """标量体数据，按 z→y→x 行优先存储"""
    dims: Dims
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != int(np.prod(dims)):
            raise DimMismatchError(f"数据长度 {data.size} 与尺寸 {dims} 不符")
        data = data.reshape(dims)
        if not np.isfinite(data).all():
            raise InvalidVoxelError("体数据包含非有限值")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


@dataclass(frozen=True)
class SegMask:
    """与 Volume 配准的整数标签场，0 为背景，k>0 为器官 k"""
    dims: Dims
    labels: np.ndarray
    max_label: int = 255

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        labels = np.asarray(self.labels)
        if labels.size != int(np.prod(dims)):
            raise DimMismatchError(f"标签长度 {labels.size} 与尺寸 {dims} 不符")
        if labels.size and (labels.min() < 0 or labels.max() > self.max_label):
            raise InvalidVoxelError(f"标签值超出 [0, {self.max_label}]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8).reshape(dims)))


@dataclass(frozen=True)
class PatchGrid:
    """体数据的均匀 patch 划分，patch 索引按 z 主序、再 y、再 x"""
    patch_size: Dims
    grid_dims: Dims
    _strides: Tuple[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        gd, gh, gw = self.grid_dims
        object.__setattr__(self, "_strides", (gh * gw, gw))

    @property
    def n(self) -> int:
        gd, gh, gw = self.grid_dims
        return gd * gh * gw

    @property
    def volume_dims(self) -> Dims:
        return tuple(g * p for g, p in zip(self.grid_dims, self.patch_size))

    @property
    def voxels_per_patch(self) -> int:
        pd, ph, pw = self.patch_size
        return pd * ph * pw

    def index(self, zb: int, yb: int, xb: int) -> int:
        return zb * self._strides[0] + yb * self._strides[1] + xb

    def block(self, i: int) -> Dims:
        if not 0 <= i < self.n:
            raise IndexError(f"patch 索引越界: {i}")
        zb, rest = divmod(i, self._strides[0])
        yb, xb = divmod(rest, self._strides[1])
        return zb, yb, xb

    def slices(self, i: int) -> Tuple[slice, slice, slice]:
        """patch i 覆盖的体素块"""
        return tuple(
            slice(b * p, (b + 1) * p) for b, p in zip(self.block(i), self.patch_size)
        )

    def check_dims(self, dims: Dims):
        if tuple(dims) != self.volume_dims:
            raise DimMismatchError(f"体数据尺寸 {tuple(dims)} 与网格 {self.volume_dims} 不一致")


def partition(volume_dims: Dims, patch_size: Dims) -> PatchGrid:
    """把 D×H×W 的体数据划分成 N 个大小一致的 3D patch"""
    if len(volume_dims) != 3 or len(patch_size) != 3:
        raise DimMismatchError("体数据与 patch 都必须是三维")
    if any(int(v) <= 0 for v in volume_dims) or any(int(p) <= 0 for p in patch_size):
        raise ZeroDimError(f"尺寸必须为正: volume={volume_dims}, patch={patch_size}")
    for dim, (v, p) in enumerate(zip(volume_dims, patch_size)):
        if v % p != 0:
            raise NonDivisibleError(dim, v, p)
    grid_dims = tuple(int(v) // int(p) for v, p in zip(volume_dims, patch_size))
    return PatchGrid(patch_size=tuple(int(p) for p in patch_size), grid_dims=grid_dims)


def patchify(array: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(D,H,W) → (N, pd·ph·pw)，每行是一个 patch 块按行优先展平"""
    grid.check_dims(array.shape)
    gd, gh, gw = grid.grid_dims
    pd, ph, pw = grid.patch_size
    blocks = array.reshape(gd, pd, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(grid.n, pd * ph * pw)


def unpatchify(per_patch: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """把每个 patch 的一个数值均匀铺满该 patch 的体素块"""
    values = np.asarray(per_patch, dtype=np.float64)
    if values.shape != (grid.n,):
        raise DimMismatchError(f"需要 {grid.n} 个 patch 值，得到 {values.shape}")
    coarse = values.reshape(grid.grid_dims)
    for axis, p in enumerate(grid.patch_size):
        coarse = np.repeat(coarse, p, axis=axis)
    return coarse


def organ_patches(mask: SegMask, grid: PatchGrid, min_voxels: int = 1) -> List[FrozenSet[int]]:
    """每个 patch 内出现的非零标签集合；空集即背景 patch"""
    grid.check_dims(mask.dims)
    flat = patchify(mask.labels, grid)
    result = []
    for row in flat:
        labels, counts = np.unique(row[row > 0], return_counts=True)
        result.append(frozenset(int(k) for k, c in zip(labels, counts) if c >= min_voxels))
    return result


def organ_bounding_box(mask: SegMask, margin: int = 0) -> Tuple[slice, slice, slice]:
    """所有非零体素的轴对齐包围盒，按 margin 膨胀并裁到边界内"""
    nonzero = np.nonzero(mask.labels)
    if nonzero[0].size == 0:
        raise EmptyMaskError("分割掩码中没有非零体素")
    box = []
    for axis, coords in enumerate(nonzero):
        lo = max(int(coords.min()) - margin, 0)
        hi = min(int(coords.max()) + 1 + margin, mask.dims[axis])
        box.append(slice(lo, hi))
    return tuple(box)


def crop_to_organ(volume: Volume, mask: SegMask, margin_voxels: int = 2,
                  out_dims: Optional[Dims] = None) -> Volume:
    """
    SBC 基线：按器官包围盒裁剪，再用三线性插值重采样到 out_dims

    角点对齐：输出第 j 个体素取源坐标 j·(n_in−1)/(n_out−1)
    """
    if tuple(volume.dims) != tuple(mask.dims):
        raise DimMismatchError(f"体数据 {volume.dims} 与掩码 {mask.dims} 尺寸不一致")
    out_dims = tuple(out_dims or volume.dims)
    box = organ_bounding_box(mask, margin_voxels)
    source = volume.data[box].astype(np.float64)

    axes = []
    for n_in, n_out in zip(source.shape, out_dims):
        if n_out == 1 or n_in == 1:
            axes.append(np.zeros(n_out))
        else:
            axes.append(np.arange(n_out) * ((n_in - 1) / (n_out - 1)))
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    resampled = ndimage.map_coordinates(source, coords, order=1, mode="nearest")
    logger.debug(f"SBC 裁剪: 包围盒 {[(s.start, s.stop) for s in box]} → {out_dims}")
    return Volume(dims=out_dims, data=resampled, spacing=volume.spacing)


def normalize_intensity(volume: Volume, window: Tuple[float, float] = (0.0, 1.0)) -> Volume:
    """强度归一化：窗口 [lower, upper] 线性映射到 [0, 1]，窗外截断"""
    lower, upper = float(window[0]), float(window[1])
    if not upper > lower:
        raise ConfigError(f"归一化窗口上界必须大于下界: {window}")
    data = np.clip((volume.data.astype(np.float64) - lower) / (upper - lower), 0.0, 1.0)
    return Volume(dims=volume.dims, data=data, spacing=volume.spacing)


# VVOL 文件格式
def _write(path: PathLike, header: str, payload: bytes):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(payload)
    except OSError as e:
        raise VolumeIOError(f"写入失败 {path}: {e}") from e


def _read(path: PathLike) -> Tuple[List[str], bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise VolumeIOError(f"读取失败 {path}: {e}") from e
    end = raw.find(b"\n")
    if end < 0:
        raise BadHeaderError(f"缺少文件头: {path}")
    try:
        fields = raw[:end].decode("ascii").split()
    except UnicodeDecodeError as e:
        raise BadHeaderError(f"文件头不是 ASCII: {path}") from e
    return fields, raw[end + 1:]


def _save_vvol(path: PathLike, dims: Dims, dtype: str, spacing, values: np.ndarray):
    header = f"{VVOL_MAGIC} {dims[0]} {dims[1]} {dims[2]} {dtype} " \
             f"{spacing[0]!r} {spacing[1]!r} {spacing[2]!r}\n"
    _write(path, header, np.ascontiguousarray(values, dtype=_DTYPES[dtype]).tobytes())


def _load_vvol(path: PathLike, expected_dtype: str):
    fields, payload = _read(path)
    if len(fields) != 8 or fields[0] != VVOL_MAGIC:
        raise BadHeaderError(f"无法解析 VVOL 文件头: {' '.join(fields)}")
    try:
        dims = tuple(int(v) for v in fields[1:4])
        dtype = fields[4]
        spacing = tuple(float(v) for v in fields[5:8])
    except ValueError as e:
        raise BadHeaderError(f"VVOL 文件头字段非法: {e}") from e
    if dtype not in _DTYPES or any(d <= 0 for d in dims):
        raise BadHeaderError(f"VVOL 文件头字段非法: dtype={dtype}, dims={dims}")
    if dtype != expected_dtype:
        raise BadHeaderError(f"期望 {expected_dtype}，文件为 {dtype}: {path}")
    np_dtype = _DTYPES[dtype]
    expected = int(np.prod(dims)) * np_dtype.itemsize
    if len(payload) != expected:
        raise PayloadMismatchError(f"数据长度 {len(payload)} 字节，文件头要求 {expected} 字节")
    return dims, spacing, np.frombuffer(payload, dtype=np_dtype).reshape(dims)


def save_volume(volume: Volume, path: PathLike):
    _save_vvol(path, volume.dims, "f32", volume.spacing, volume.data)


def load_volume(path: PathLike) -> Volume:
    dims, spacing, values = _load_vvol(path, "f32")
    return Volume(dims=dims, data=values.astype(np.float32), spacing=spacing)


def save_mask(mask: SegMask, path: PathLike, spacing=(1.0, 1.0, 1.0)):
    _save_vvol(path, mask.dims, "u8", spacing, mask.labels)


def load_mask(path: PathLike) -> SegMask:
    dims, _, values = _load_vvol(path, "u8")
    return SegMask(dims=dims, labels=values)


def save_matrix(matrix: np.ndarray, path: PathLike):
    """VMAT1 方阵：`VMAT1 <N> <N> f32\\n` + 行优先小端 float32"""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DimMismatchError(f"只支持二维矩阵: {matrix.shape}")
    header = f"{VMAT_MAGIC} {matrix.shape[0]} {matrix.shape[1]} f32\n"
    _write(path, header, np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_matrix(path: PathLike) -> np.ndarray:
    fields, payload = _read(path)
    if len(fields) != 4 or fields[0] != VMAT_MAGIC or fields[3] != "f32":
        raise BadHeaderError(f"无法解析 VMAT 文件头: {' '.join(fields)}")
    try:
        rows, cols = int(fields[1]), int(fields[2])
    except ValueError as e:
        raise BadHeaderError(f"VMAT 文件头字段非法: {e}") from e
    if len(payload) != rows * cols * 4:
        raise PayloadMismatchError(f"数据长度 {len(payload)} 字节，文件头要求 {rows * cols * 4} 字节")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
