# -*- coding: utf-8 -*-
"""
消融实验服务
在相同的合成训练/验证划分上训练不同 TCM 模块（或不同 kernel），汇总 mAP、参数量、MAC 与 CPU 耗时
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.records import EvalReport
from models.run_config import ModelConfig, RunConfig, SyntheticDatasetSpec, TcmVariant
from numerics.tensor import SeqTensor
from services.dataset_service import generate_synthetic_dataset, split_dataset
from services.evaluation_service import EvaluationService
from services.inference_service import InferenceService
from services.model_service import backbone_forward, count_macs, count_params, init_params, model_forward
from services.training_service import TrainingService
from utils.metrics import SimpleMetrics, time_call
from utils.table_builder import TableBuilder, map_columns

logger = logging.getLogger(__name__)

# 全尺寸参考量级（THUMOS14, T=2304），仅用于文本表注释
REFERENCE_MAGNITUDES = (
    'full-scale reference at T=2304: maxpool 7.1M params / 16.4 GMACs, '
    'conv 30.5M / 45.6 GMACs, attention 29.3M / 45.3 GMACs'
)
VARIANT_REFERENCE = (
    'full-scale reference average mAP: conv 59.4, subsample 61.0, avgpool 63.2, attention 66.8, maxpool 67.7'
)
KERNEL_REFERENCE = 'full-scale reference average mAP: k=3 67.7, k=4 67.1, k=5 66.8, k=6 65.7'


@dataclass
class AblationRow:
    name: str
    kernel: int
    seed: int
    report: EvalReport
    params: int
    macs: int


@dataclass
class Timing:
    forward_ms: float
    backbone_ms: float


@dataclass
class AblationTable:
    """(配置, seed) 逐行结果；name 相同的行按 seed 聚合"""
    thresholds: List[float]
    rows: List[AblationRow] = field(default_factory=list)
    timings: Dict[str, Timing] = field(default_factory=dict)
    # 文本表末尾的全尺寸参考行
    references: List[str] = field(default_factory=list)

    def names(self) -> List[str]:
        seen = []
        for row in self.rows:
            if row.name not in seen:
                seen.append(row.name)
        return seen

    def rows_for(self, name: str) -> List[AblationRow]:
        return [row for row in self.rows if row.name == name]

    def seed_mean(self, name: str) -> float:
        return float(np.mean([row.report.average_map for row in self.rows_for(name)]))

    def aggregates(self) -> List[Dict]:
        result = []
        for name in self.names():
            rows = self.rows_for(name)
            values = [row.report.average_map for row in rows]
            result.append({
                'name': name,
                'mean': float(np.mean(values)),
                'min': float(np.min(values)),
                'max': float(np.max(values)),
                'map_per_threshold': [float(np.mean([r.report.map_per_threshold[i] for r in rows]))
                                      for i in range(len(self.thresholds))],
                'params': rows[0].params,
                'macs': rows[0].macs,
            })
        return result

    def to_csv(self) -> str:
        """variant,seed,avg_map,map@τ...,params,macs；每个配置之后跟一行 seed=mean 的聚合"""
        header = ['variant', 'seed', 'avg_map'] + map_columns(self.thresholds) + ['params', 'macs']
        rows = []
        aggregates = {item['name']: item for item in self.aggregates()}
        for name in self.names():
            for row in self.rows_for(name):
                rows.append([name, row.seed, row.report.average_map] + list(row.report.map_per_threshold)
                            + [row.params, row.macs])
            item = aggregates[name]
            rows.append([name, 'mean', item['mean']] + item['map_per_threshold'] + [item['params'], item['macs']])
        return TableBuilder.csv_table(header, rows)

    def to_text(self) -> str:
        header = ['variant', 'avg_map', 'min', 'max'] + map_columns(self.thresholds) + \
                 ['params', 'macs', 'fwd_ms', 'backbone_ms']
        rows = []
        for item in self.aggregates():
            timing = self.timings.get(item['name'])
            rows.append(
                [item['name'], item['mean'], item['min'], item['max']] + item['map_per_threshold']
                + [item['params'], item['macs'],
                   timing.forward_ms if timing else '-', timing.backbone_ms if timing else '-']
            )
        seeds = sorted({row.seed for row in self.rows})
        comments = [f"seeds: {', '.join(str(s) for s in seeds)}"] + self.references
        return TableBuilder.text_table(header, rows, comments)


def time_forward(model_config: ModelConfig, length: int, repeats: int = 3, seed: int = 0) -> Timing:
    """在随机输入上测量整体前向与骨干网络（投影 + 金字塔）的最快耗时"""
    registry = SimpleMetrics()
    params = init_params(model_config, seed)
    x = SeqTensor(np.random.default_rng(seed).standard_normal((length, model_config.input_dim)))
    time_call('forward', model_forward, x, params, model_config, repeats=repeats, registry=registry)
    time_call('backbone', backbone_forward, x, params, model_config, repeats=repeats, registry=registry)
    return Timing(registry.best_time('forward') * 1e3, registry.best_time('backbone') * 1e3)


def benchmark_spec(run_config: RunConfig, model_config: ModelConfig, seed: int) -> SyntheticDatasetSpec:
    """一个 seed 的训练 + 验证数据规格；维度与类别数跟随模型"""
    ablation = run_config.ablation
    return run_config.synth.model_copy(update={
        'seed': seed,
        'num_videos': ablation.train_videos + ablation.val_videos,
        'input_dim': model_config.input_dim,
        'num_classes': model_config.num_classes,
    })


def run_experiment(run_config: RunConfig, model_config: ModelConfig, seed: int) -> EvalReport:
    """用给定 seed 生成数据、训练并在验证集上评估"""
    videos = generate_synthetic_dataset(benchmark_spec(run_config, model_config, seed))
    train_videos, val_videos = split_dataset(videos, run_config.ablation.train_videos)
    result = TrainingService(run_config).fit(train_videos, seed=seed, model_config=model_config)
    predictions = InferenceService(model_config, run_config.inference).predict(val_videos, result.params)
    ground_truth = {v.video_id: v.instances for v in val_videos}
    return EvaluationService(run_config.eval.tiou_thresholds).evaluate(predictions, ground_truth)


def _run_grid(run_config: RunConfig, configs: Dict[str, ModelConfig], seeds: Sequence[int],
              timing: bool, references: Sequence[str]) -> AblationTable:
    table = AblationTable(thresholds=list(run_config.eval.tiou_thresholds), references=list(references))
    length = run_config.ablation.timing_length
    for name, model_config in configs.items():
        params = count_params(init_params(model_config, 0))
        macs = count_macs(model_config, length)
        for seed in seeds:
            report = run_experiment(run_config, model_config, seed)
            table.rows.append(AblationRow(name, model_config.tcm_kernel, seed, report, params, macs))
            logger.info(f"{name} seed={seed}: average mAP={report.average_map:.4f}")
        if timing:
            table.timings[name] = time_forward(model_config, length, run_config.ablation.timing_repeats)
    return table


def run_ablation(run_config: RunConfig, variants: Optional[Sequence[TcmVariant]] = None,
                 seeds: Optional[Sequence[int]] = None, timing: bool = True) -> AblationTable:
    """对每种 TCM 模块在相同的划分上逐 seed 训练评估"""
    variants = list(variants) if variants is not None else list(run_config.ablation.variants)
    seeds = list(seeds) if seeds is not None else list(run_config.ablation.seeds)
    configs = {
        TcmVariant(variant).value: run_config.model.model_copy(update={'tcm_variant': TcmVariant(variant)})
        for variant in variants
    }
    return _run_grid(run_config, configs, seeds, timing, [VARIANT_REFERENCE, REFERENCE_MAGNITUDES])


def run_kernel_sweep(run_config: RunConfig, kernels: Optional[Sequence[int]] = None,
                     seeds: Optional[Sequence[int]] = None, timing: bool = True) -> AblationTable:
    """固定 TCM 模块，扫描 tcm_kernel"""
    kernels = list(kernels) if kernels is not None else list(run_config.ablation.kernels)
    seeds = list(seeds) if seeds is not None else list(run_config.ablation.seeds)
    variant = run_config.model.tcm_variant.value
    configs = {
        f"{variant}-k{k}": run_config.model.model_copy(update={'tcm_kernel': k})
        for k in kernels
    }
    return _run_grid(run_config, configs, seeds, timing, [KERNEL_REFERENCE])


def count_table(model_config: ModelConfig, length: int,
                variants: Optional[Sequence[TcmVariant]] = None) -> List[Dict]:
    """每种 TCM 模块的参数量与 MAC 数"""
    variants = list(variants) if variants is not None else list(TcmVariant)
    rows = []
    for variant in variants:
        config = model_config.model_copy(update={'tcm_variant': TcmVariant(variant)})
        rows.append({
            'variant': TcmVariant(variant).value,
            'params': count_params(init_params(config, 0)),
            'macs': count_macs(config, length),
        })
    return rows


def format_count_table(rows: List[Dict], length: int) -> str:
    header = ['variant', 'params', 'macs', 'gmacs']
    body = [[r['variant'], r['params'], r['macs'], r['macs'] / 1e9] for r in rows]
    return TableBuilder.text_table(header, body, [f"T={length}", REFERENCE_MAGNITUDES])


class AblationService:
    """对比实验服务：消融、kernel 扫描与效率统计共用一份运行配置"""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config

    def ablate(self, variants: Optional[Sequence[TcmVariant]] = None, seeds: Optional[Sequence[int]] = None,
               timing: bool = True) -> AblationTable:
        table = run_ablation(self.run_config, variants, seeds, timing)
        for item in table.aggregates():
            logger.info(f"{item['name']}: mean average mAP={item['mean']:.4f} "
                        f"[{item['min']:.4f}, {item['max']:.4f}]")
        return table

    def sweep(self, kernels: Optional[Sequence[int]] = None, seeds: Optional[Sequence[int]] = None,
              timing: bool = True) -> AblationTable:
        return run_kernel_sweep(self.run_config, kernels, seeds, timing)

    def count(self, length: int, variants: Optional[Sequence[TcmVariant]] = None) -> Tuple[List[Dict], str]:
        """返回 (行, 文本表)"""
        rows = count_table(self.run_config.model, length, variants)
        return rows, format_count_table(rows, length)
