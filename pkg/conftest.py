"""
测试共用的小规模配置：16³ 体数据、8³ patch（N=8），两层两头 16 维
"""
import json

import pytest

from ofa_lab.phantom_service import generate
from ofa_lab.schemas import PhantomConfig, RunConfig, VitConfig


def tiny_phantom(**overrides) -> PhantomConfig:
    fields = dict(dims=(16, 16, 16), organ_radius=(3.0, 5.0), lesion_radius=(1.0, 2.0),
                  distractor_count=2, count=20, seed=7)
    fields.update(overrides)
    return PhantomConfig(**fields)


def tiny_run(manifest, out_dir, **overrides) -> RunConfig:
    fields = dict(
        model=VitConfig(input_dims=(16, 16, 16), patch_size=(8, 8, 8),
                        embed_dim=16, layers=2, heads=2, seed=3),
        manifest=str(manifest), out_dir=str(out_dir),
        alpha=1000.0, layer_preset="first+last",
        lr=1e-3, batch_size=8, epochs=2, seed=3, split_seed=3,
    )
    fields.update(overrides)
    return RunConfig(**fields)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """20 个样本（10 阳 10 阴）的合成数据集，返回 manifest 路径"""
    out = tmp_path_factory.mktemp("phantoms")
    generate(tiny_phantom(), out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def maskless_manifest(tiny_dataset, tmp_path_factory):
    """同一批体数据，但所有 mask 字段为 null"""
    entries = json.loads(tiny_dataset.read_text(encoding="utf-8"))
    base = tiny_dataset.parent
    stripped = [{"volume": str(base / e["volume"]), "mask": None, "label": e["label"]} for e in entries]
    path = tmp_path_factory.mktemp("maskless") / "manifest.json"
    path.write_text(json.dumps(stripped), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def organ_dataset(tmp_path_factory):
    """24³ 体数据、8³ patch（N=27），器官只占少数 patch"""
    out = tmp_path_factory.mktemp("organ_phantoms")
    generate(tiny_phantom(dims=(24, 24, 24), organ_radius=(3.0, 4.0), count=30), out)
    return out / "manifest.json"
