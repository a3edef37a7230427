#!/usr/bin/env python3
"""
依赖测试脚本
验证所有必需的Python包与 ofa_lab 模块是否能正确导入
"""

import sys
import importlib
from typing import List, Tuple

CORE_DEPENDENCIES = [
    ("numpy", "数值计算库"),
    ("scipy", "科学计算库"),
    ("pandas", "数据处理库"),
    ("sklearn", "机器学习库（评估指标）", "scikit-learn"),
    ("pydantic", "数据校验"),
    ("tqdm", "进度条"),
    ("pytest", "测试框架"),
]

PROJECT_MODULES = [
    ("ofa_lab.volume_service", "体数据与 patch 网格"),
    ("ofa_lab.opam_service", "器官 patch 亲和矩阵"),
    ("ofa_lab.autograd", "反向模式自动微分"),
    ("ofa_lab.vit_model", "3D ViT"),
    ("ofa_lab.loss_service", "组合损失"),
    ("ofa_lab.optimizer", "Adam 优化器"),
    ("ofa_lab.metrics_service", "AUC / Youden / F1"),
    ("ofa_lab.rollout_service", "注意力 rollout"),
    ("ofa_lab.phantom_service", "合成体模"),
    ("ofa_lab.training_service", "训练与消融扫描"),
    ("ofa_lab.config_service", "配置加载"),
]


def check_import(module_name: str) -> Tuple[bool, str]:
    """
    尝试导入模块

    Returns:
        (成功状态, 错误信息)
    """
    try:
        importlib.import_module(module_name)
        return True, ""
    except ImportError as e:
        return False, str(e)
    except Exception as e:
        return False, f"未知错误: {e}"


def collect_failures(entries) -> List[Tuple[str, str]]:
    failed = []
    for module, description, *install_name in entries:
        install_name = install_name[0] if install_name else module
        success, error = check_import(module)
        status = "✅" if success else "❌"
        print(f"{status} {description:<20} ({install_name})")
        if not success:
            failed.append((install_name, error))
            print(f"   错误: {error}")
    return failed


def test_core_dependencies():
    assert not collect_failures(CORE_DEPENDENCIES)


def test_project_modules():
    assert not collect_failures(PROJECT_MODULES)


def main():
    """主测试函数"""
    print("🔍 OFA Lab - 依赖检测")
    print("=" * 50)

    print("\n📦 核心依赖检测:")
    failed_deps = collect_failures(CORE_DEPENDENCIES)

    print("\n🔧 项目模块检测:")
    failed_deps += collect_failures(PROJECT_MODULES)

    print(f"\n🐍 Python版本: {sys.version}")
    if sys.version_info >= (3, 9):
        print("✅ Python版本兼容")
    else:
        print("❌ Python版本过低，需要3.9+")
        failed_deps.append(("Python", "版本需要3.9+"))

    print("\n" + "=" * 50)
    if not failed_deps:
        print("🎉 所有依赖检测通过！")
        print("\n✨ 可以运行以下命令开始实验:")
        print("   python cli.py synth --out data/")
        print("   ./start.sh")
        return 0

    print(f"❌ 发现 {len(failed_deps)} 个问题:")
    for dep, error in failed_deps:
        print(f"   - {dep}: {error}")
    print("\n🔧 修复建议:")
    print("   1. 确保虚拟环境已激活:")
    print("      source venv/bin/activate")
    print("   2. 重新安装依赖:")
    print("      pip install -r requirements.txt")
    return 1


if __name__ == "__main__":
    sys.exit(main())
