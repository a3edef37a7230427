#!/usr/bin/env python3
"""
用法:
1. 生成合成数据:   python cli.py synth --out data/ [--imbalance 0.12] [--bayes-check]
2. 导出 OPAM:      python cli.py opam --mask data/masks/sample_0000.vvol --out runs/opam
3. 训练:           python cli.py train --manifest data/manifest.json --set train.alpha=1000
4. 评估:           python cli.py eval --checkpoint runs/train/best.ckpt
5. 注意力热力图:   python cli.py rollout --checkpoint runs/train/best.ckpt --volume v.vvol --slices 8 12
6. 消融扫描:       python cli.py sweep --manifest data/manifest.json
7. 梯度检验:       python cli.py grad-check
8. 基线对比:       python cli.py compare --manifest data/manifest.json --set compare.seeds=[0,1,2]

退出码: 0 成功；2 配置/校验错误；1 运行时错误
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from ofa_lab.config_service import dump_config, load_config
from ofa_lab.errors import ConfigError, OfaError
from ofa_lab.opam_service import build_opam, softmax_target
from ofa_lab.phantom_service import MANIFEST_NAME, bayes_check, generate
from ofa_lab.rollout_service import run_rollout
from ofa_lab.training_service import (
    append_results_row, compare, evaluate_checkpoint, grad_check_model, sweep, sweep_row, train,
)
from ofa_lab.schemas import ExperimentConfig, PhantomConfig, RunConfig
from ofa_lab.vit_model import check_config, load_checkpoint
from ofa_lab.volume_service import load_mask, load_volume, normalize_intensity, save_matrix

logger = logging.getLogger("ofa_lab.cli")

SUBCOMMANDS = ("synth", "opam", "train", "eval", "rollout", "sweep", "grad-check", "compare")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='实验配置 JSON 文件')
    common.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='KEY=VALUE', help='点号覆盖，如 train.alpha=1000（可重复）')
    common.add_argument('--out', help='输出目录')
    common.add_argument('--seed', type=int, help='全局随机种子')
    common.add_argument('--threads', type=int, help='工作线程数上限')
    common.add_argument('--preset', default='toy', choices=['toy', 'full'], help='基础预设 (默认: toy)')
    common.add_argument('--verbose', action='store_true', help='输出 DEBUG 日志')

    parser = argparse.ArgumentParser(description='OFA 器官聚焦注意力实验工具')
    sub = parser.add_subparsers(dest='command', metavar='{' + ','.join(SUBCOMMANDS) + '}')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='生成合成体模数据集')
    p.add_argument('--imbalance', type=float, help='阳性比例，覆盖 phantom.class_balance')
    p.add_argument('--bayes-check', action='store_true', help='检验任务可学性')

    p = sub.add_parser('opam', parents=[common], help='由掩码导出 OPAM 与 softmax 目标')
    p.add_argument('--mask', required=True, help='掩码 VVOL 文件')

    p = sub.add_parser('train', parents=[common], help='训练 ViT（α>0 时带 OFA 监督）')
    p.add_argument('--manifest', help='数据清单，覆盖 train.manifest')
    p.add_argument('--resume', help='从 last.ckpt 继续训练')

    p = sub.add_parser('eval', parents=[common], help='在测试集上评估检查点')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--manifest', help='数据清单（默认用检查点记录的清单）')
    p.add_argument('--threshold-on', default='val', choices=['val', 'test'],
                   help='Youden 阈值来自哪个划分 (默认: val)')

    p = sub.add_parser('rollout', parents=[common], help='注意力 rollout 热力图')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--volume', required=True)
    p.add_argument('--mask', help='可选掩码，用于计算器官注意力占比')
    p.add_argument('--slices', type=int, nargs='*', help='导出 PGM 的轴向切片索引')

    p = sub.add_parser('sweep', parents=[common], help='α × 层预设 消融扫描')
    p.add_argument('--manifest', help='数据清单，覆盖 train.manifest')
    p.add_argument('--threshold-on', default='val', choices=['val', 'test'])

    p = sub.add_parser('grad-check', parents=[common], help='完整损失的有限差分梯度检验')
    p.add_argument('--samples', type=int, default=2, help='参与检验的合成样本数')
    p.add_argument('--max-coordinates', type=int, default=10_000, help='最多检验的参数坐标数')
    p.add_argument('--epsilon', type=float, default=1e-4, help='中心差分步长')
    p.add_argument('--tolerance', type=float, default=1e-4)

    p = sub.add_parser('compare', parents=[common], help='多种子对比 α=0 基线与 OFA')
    p.add_argument('--manifest', help='数据清单，覆盖 train.manifest')
    p.add_argument('--threshold-on', default='val', choices=['val', 'test'])
    return parser


def resolve_config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    config = load_config(args.config, overrides, seed=args.seed, threads=args.threads,
                         preset=args.preset)
    updates = {}
    if getattr(args, 'manifest', None) and args.command in ('train', 'sweep', 'compare'):
        updates['manifest'] = args.manifest
    if args.out and args.command == 'train':
        updates['out_dir'] = args.out
    if updates:
        config = config.model_copy(update={'train': config.train.model_copy(update=updates)})
    if args.command == 'synth' and args.imbalance is not None:
        phantom = PhantomConfig.model_validate({**config.phantom.model_dump(), 'class_balance': args.imbalance})
        config = config.model_copy(update={'phantom': phantom})
    return config


def output_dir(args, config: ExperimentConfig) -> Path:
    if args.command == 'train':
        return Path(config.train.out_dir)
    return Path(args.out or f"runs/{args.command}")


def write_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding='utf-8')


def run_synth(args, config: ExperimentConfig, out: Path) -> int:
    entries = generate(config.phantom, out, threads=config.threads)
    print(f"✅ 已生成 {len(entries)} 个样本: {out / MANIFEST_NAME}")
    if args.bayes_check:
        report = bayes_check(config.phantom)
        write_json(out / 'bayes_check.json', report.model_dump())
        if not report.learnable:
            raise OfaError(f"任务不可学: 器官判别 AUC={report.oracle_auc:.3f}, "
                           f"背景判别 AUC={report.background_auc:.3f}")
    return 0


def run_opam(args, config: ExperimentConfig, out: Path) -> int:
    grid = check_config(config.train.model)
    opam = build_opam(load_mask(args.mask), grid, config.train.min_organ_voxels)
    target = softmax_target(opam, include_cls=config.train.ofa_include_cls)
    save_matrix(opam.m, out / 'opam.vmat')
    save_matrix(target.t, out / 'opam_target.vmat')
    print(f"✅ OPAM: N={opam.n}, 器官 patch {len(opam.organ_indices)} 个")
    return 0


def run_train(args, config: ExperimentConfig, out: Path) -> int:
    result = train(config.train, threads=config.threads, resume=args.resume)
    print(f"✅ 训练完成: 最佳第 {result.best_epoch} 轮, 验证 AUC={result.best_val_auc}")
    return 0


def run_eval(args, config: ExperimentConfig, out: Path) -> int:
    report = evaluate_checkpoint(args.checkpoint, manifest=args.manifest,
                                 threshold_on=args.threshold_on, threads=config.threads)
    _, _, meta = load_checkpoint(args.checkpoint)
    run = RunConfig.model_validate(meta['run'])
    write_json(out / 'metrics.json', report.model_dump())
    append_results_row(out / 'results.csv',
                       sweep_row(run, report, run.layer_preset if run.alpha > 0 else 'none'))
    print(json.dumps(report.model_dump(), indent=2, ensure_ascii=False))
    return 0


def run_rollout_cmd(args, config: ExperimentConfig, out: Path) -> int:
    params, _, meta = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    if 'run' in meta:
        run = RunConfig.model_validate(meta['run'])
        if run.normalize:
            volume = normalize_intensity(volume, run.normalize_window)
    mask = load_mask(args.mask) if args.mask else None
    slices = args.slices if args.slices is not None else config.rollout.slices
    record = run_rollout(params, volume, out, mask=mask, slices=slices,
                         min_voxels=config.train.min_organ_voxels)
    write_json(out / 'rollout.json', record.model_dump())
    print(f"✅ 热力图已写入 {record.heatmap}, 器官注意力占比={record.organ_attention_mass}")
    return 0


def run_sweep(args, config: ExperimentConfig, out: Path) -> int:
    table = sweep(config.train, config.sweep, out, threads=config.threads,
                  threshold_on=args.threshold_on)
    print(table.to_string(index=False))
    return 0


def run_grad_check(args, config: ExperimentConfig, out: Path) -> int:
    report = grad_check_model(config.train, config.phantom, n_samples=args.samples,
                              epsilon=args.epsilon, tolerance=args.tolerance,
                              max_coordinates=args.max_coordinates)
    write_json(out / 'grad_check.json', report.model_dump())
    print(f"{'✅' if report.passed else '❌'} 最大相对误差 {report.max_rel_error:.3e} "
          f"({report.n_checked}/{report.n_total} 个坐标)")
    return 0 if report.passed else 1


def run_compare(args, config: ExperimentConfig, out: Path) -> int:
    summary = compare(config.train, config.compare, out, threads=config.threads,
                      threshold_on=args.threshold_on)
    print(json.dumps(summary.model_dump(), indent=2, ensure_ascii=False))
    return 0


HANDLERS = {
    'synth': run_synth,
    'opam': run_opam,
    'train': run_train,
    'eval': run_eval,
    'rollout': run_rollout_cmd,
    'sweep': run_sweep,
    'grad-check': run_grad_check,
    'compare': run_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        config = resolve_config(args)
        out = output_dir(args, config)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(config, out / 'run.json')
        return HANDLERS[args.command](args, config, out)
    except (ConfigError, ValidationError) as e:
        logger.error(f"配置错误: {e}")
        return 2
    except Exception as e:
        logger.error(f"运行失败: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
