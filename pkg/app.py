# -*- coding: utf-8 -*-
"""
命令行入口
python app.py <synth|train|infer|eval|ablate|sweep|count|diag> [--seed N] [--config PATH] [--out DIR] ...
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

from conf.config import config
from config import env_config
from handlers.experiment_handler import ExperimentHandler
from handlers.pipeline_handler import PipelineHandler
from models.run_config import RunConfig, TcmVariant, format_validation_error, run_config_manager
from utils.errors import ConfigError, TemporalMaxerError
from utils.metrics import metrics
from version import __version__

logger = logging.getLogger(__name__)

LOG_FORMAT: str = config.LOG_FORMAT


def setup_logging() -> None:
    """日志只写 stderr（及可选文件），stdout 留给命令结果"""
    level = getattr(logging, str(config.LOG_LEVEL).upper(), logging.WARNING)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if config.LOG_FILE:
        log_dir = os.path.dirname(config.LOG_FILE)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(config.LOG_FILE, encoding='utf-8'))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers)
    log_environment()


def log_environment() -> None:
    logger.debug(f"tmx {__version__} 运行环境: {env_config.get_config_dict()}")


def log_command_stats() -> None:
    """把本次命令的计数与耗时写入日志，然后清空全局指标"""
    stats = metrics.get_stats()
    for name, timing in sorted(stats['timings'].items()):
        logger.info(f"{name}: {timing['count']} 次, 平均 {timing['avg']:.3f}s, 最长 {timing['max']:.3f}s")
    for name, count in sorted(stats['counters'].items()):
        logger.debug(f"{name} = {count}")
    metrics.reset()


def _int_list(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的实数: {text!r}")


def _variant_list(text: str) -> List[TcmVariant]:
    try:
        return [TcmVariant(item.strip()) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"未知 TCM 模块: {text!r}（可选 {', '.join(v.value for v in TcmVariant)}）"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='tmx', description='TemporalMaxer 桌面规模训练/推理/评估流水线')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='覆盖 train.seed 与 synth.seed')
    common.add_argument('--config', default=None, help='运行配置 JSON 文件')
    common.add_argument('--out', default=None, help=f'输出目录（默认 {config.OUTPUT_DIR}）')
    common.add_argument('--variant', choices=[v.value for v in TcmVariant], default=None,
                        help='覆盖 model.tcm_variant')
    common.add_argument('--kernel', type=int, default=None, help='覆盖 model.tcm_kernel')
    common.add_argument('--steps', type=int, default=None, help='覆盖 train.steps')
    common.add_argument('--lr', type=float, default=None, help='覆盖 train.lr')

    subparsers.add_parser('synth', parents=[common], help='生成合成特征文件与标注')

    p = subparsers.add_parser('train', parents=[common], help='训练并写出检查点')
    p.add_argument('--features', required=True, help='特征目录（*.tmxf）')
    p.add_argument('--annotations', required=True, help='标注 JSON')

    p = subparsers.add_parser('infer', parents=[common], help='用检查点推理')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--features', required=True)

    p = subparsers.add_parser('eval', parents=[common], help='tIoU-mAP 评估')
    p.add_argument('--predictions', required=True)
    p.add_argument('--annotations', required=True)
    p.add_argument('--thresholds', type=_float_list, default=None, help='如 0.3,0.4,0.5,0.6,0.7')

    p = subparsers.add_parser('ablate', parents=[common], help='TCM 模块消融')
    p.add_argument('--variants', type=_variant_list, default=None)
    p.add_argument('--seeds', type=_int_list, default=None)
    p.add_argument('--no-timing', action='store_true', help='不测量 CPU 前向耗时')

    p = subparsers.add_parser('sweep', parents=[common], help='TCM kernel 扫描')
    p.add_argument('--kernels', type=_int_list, default=None)
    p.add_argument('--seeds', type=_int_list, default=None)
    p.add_argument('--no-timing', action='store_true')

    p = subparsers.add_parser('count', parents=[common], help='参数量与 MAC 统计')
    p.add_argument('--length', type=int, default=None, help='序列长度（默认 ablation.timing_length）')

    p = subparsers.add_parser('diag', parents=[common], help='特征余弦相似度诊断')
    p.add_argument('--features', required=True, help='单个 .tmxf 文件')
    return parser


def apply_overrides(run_config: RunConfig, args: argparse.Namespace, from_file: bool) -> RunConfig:
    """命令行参数覆盖配置文件中的值，并重新校验"""
    data = run_config.model_dump(mode='json')
    seed = args.seed
    if seed is None and not from_file:
        seed = config.DEFAULT_SEED
    if seed is not None:
        data['train']['seed'] = seed
        data['synth']['seed'] = seed
    if args.variant is not None:
        data['model']['tcm_variant'] = args.variant
    if args.kernel is not None:
        data['model']['tcm_kernel'] = args.kernel
    if args.steps is not None:
        data['train']['steps'] = args.steps
    if args.lr is not None:
        data['train']['lr'] = args.lr
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"命令行参数无效: {format_validation_error(e)}")


def run_command(args: argparse.Namespace) -> str:
    run_config = apply_overrides(run_config_manager.load(args.config), args, from_file=bool(args.config))
    out_dir = args.out or config.OUTPUT_DIR
    pipeline = PipelineHandler(run_config, out_dir)
    experiments = ExperimentHandler(run_config, out_dir)

    if args.command == 'synth':
        return pipeline.synth()
    if args.command == 'train':
        return pipeline.train(args.features, args.annotations)
    if args.command == 'infer':
        return pipeline.infer(args.checkpoint, args.features)
    if args.command == 'eval':
        return pipeline.evaluate(args.predictions, args.annotations, args.thresholds)
    if args.command == 'ablate':
        return experiments.ablate(args.variants, args.seeds, timing=not args.no_timing)
    if args.command == 'sweep':
        return experiments.sweep(args.kernels, args.seeds, timing=not args.no_timing)
    if args.command == 'count':
        variants = [TcmVariant(args.variant)] if args.variant else None
        return experiments.count(args.length or run_config.ablation.timing_length, variants)
    return experiments.diag(args.features)


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令

    Returns:
        int: 0 成功；1 运行失败（stderr 输出一行 tmx-error 诊断）；2 用法错误
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 已打印用法；--help/--version 返回 0
        return int(e.code) if e.code is not None else 0

    try:
        output = run_command(args)
    except TemporalMaxerError as e:
        logger.debug("命令失败", exc_info=True)
        message = ' '.join(str(e).split())
        print(f"{config.ERROR_PREFIX}: {type(e).__name__}: {message}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"{config.ERROR_PREFIX}: {type(e).__name__}: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    finally:
        log_command_stats()

    if output:
        print(output)
    return 0


if __name__ == '__main__':
    setup_logging()
    sys.exit(cli_dispatch())
