"""
配置服务：读取实验 JSON、应用 --set 覆盖、统一种子
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Set

from pydantic import ValidationError

from .errors import ConfigError
from .schemas import ExperimentConfig, PhantomConfig, RunConfig, VitConfig

logger = logging.getLogger(__name__)


def toy_config() -> ExperimentConfig:
    """桌面规模：24³ 体数据、8³ patch（N=27），几分钟内能在 CPU 上训练完"""
    return ExperimentConfig(
        phantom=PhantomConfig(dims=(24, 24, 24), count=280),
        train=RunConfig(
            model=VitConfig(input_dims=(24, 24, 24), patch_size=(8, 8, 8),
                            embed_dim=64, layers=4, heads=4),
            lr=1e-3, batch_size=32, epochs=20,
        ),
    )


def full_config() -> ExperimentConfig:
    """完整规模超参数：96³ 输入、16³ patch、12 层 12 头 768 维，α=1000"""
    return ExperimentConfig(
        phantom=PhantomConfig(dims=(96, 96, 96), organ_radius=(20.0, 32.0),
                              lesion_radius=(4.0, 8.0), count=280),
        train=RunConfig(
            model=VitConfig(input_dims=(96, 96, 96), patch_size=(16, 16, 16),
                            embed_dim=768, layers=12, heads=12, mlp_ratio=4.0),
            lr=1e-5, batch_size=32, epochs=50, alpha=1000.0,
        ),
    )


PRESETS = {"toy": toy_config, "full": full_config}


def parse_value(text: str) -> Any:
    """先按 JSON 字面量解析，失败则当作字符串"""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str],
                    touched: Optional[Set[str]] = None) -> Dict[str, Any]:
    """`train.alpha=1000` 形式的点号覆盖；键必须已在配置中声明，写过的键记入 touched"""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"覆盖项格式应为 key=value: {item}")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"未知配置键: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"未知配置键: {key}")
        node[parts[-1]] = parse_value(raw)
        if touched is not None:
            touched.add(key)
        logger.debug(f"配置覆盖 {key} = {node[parts[-1]]!r}")
    return data


def _is_touched(key: str, touched: Set[str]) -> bool:
    return any(key == t or key.startswith(t + ".") for t in touched)


def propagate_seed(config: ExperimentConfig, seed: int,
                   keep: Set[str] = frozenset()) -> ExperimentConfig:
    """一个种子驱动所有随机源：数据合成、划分、初始化、批次顺序；keep 中的种子键保持原值"""
    def pick(key: str, current: int) -> int:
        return current if _is_touched(key, keep) else seed

    train = config.train.model_copy(update={
        "seed": pick("train.seed", config.train.seed),
        "split_seed": pick("train.split_seed", config.train.split_seed),
        "model": config.train.model.model_copy(
            update={"seed": pick("train.model.seed", config.train.model.seed)}),
    })
    return config.model_copy(update={
        "seed": seed,
        "phantom": config.phantom.model_copy(update={"seed": pick("phantom.seed", config.phantom.seed)}),
        "train": train,
    })


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                seed: Optional[int] = None, threads: Optional[int] = None,
                preset: str = "toy") -> ExperimentConfig:
    """
    加载顺序：预设 → JSON 文件（只需给出要改的键）→ --set 覆盖 → --seed / --threads

    文件和覆盖没写 seed 时沿用顶层 seed；--seed 总是覆盖全部种子。
    """
    if preset not in PRESETS:
        raise ConfigError(f"未知预设: {preset}")
    data = PRESETS[preset]().model_dump(mode="json")
    touched: Set[str] = set()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"配置文件顶层必须是对象: {path}")
        _merge(data, loaded, prefix="", touched=touched)
    apply_overrides(data, overrides, touched=touched)

    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e

    if seed is None:
        config = propagate_seed(config, config.seed, keep=touched)
    else:
        config = propagate_seed(config, seed)
    if threads is not None:
        config = config.model_copy(update={
            "threads": threads,
            "train": config.train.model_copy(update={"threads": threads}),
        })
    return config


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str, touched: Set[str]):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"未知配置键: {prefix}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, prefix=f"{prefix}{key}.", touched=touched)
        else:
            base[key] = value
            touched.add(f"{prefix}{key}")


def dump_config(config: ExperimentConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
