# -*- coding: utf-8 -*-
"""
实验处理器
ablate / sweep / count / diag 子命令：结果同时写成 CSV 与对齐文本
"""

import logging
from pathlib import Path
from typing import Optional, Sequence

from models.run_config import RunConfig, TcmVariant
from services import storage_service
from services.ablation_service import AblationService
from services.evaluation_service import EvaluationService
from utils.metrics import track_performance
from utils.table_builder import TableBuilder

logger = logging.getLogger(__name__)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)


class ExperimentHandler:
    """处理消融实验、kernel 扫描、效率统计与相似度诊断的专用处理器"""

    def __init__(self, run_config: RunConfig, out_dir: str):
        self.run_config = run_config
        self.out_dir = Path(out_dir)
        self.ablation_service = AblationService(run_config)

    @track_performance('ablate_command')
    def ablate(self, variants: Optional[Sequence[TcmVariant]] = None, seeds: Optional[Sequence[int]] = None,
               timing: bool = True) -> str:
        table = self.ablation_service.ablate(variants, seeds, timing)
        _write_text(self.out_dir / 'ablation.csv', table.to_csv())
        text = table.to_text()
        _write_text(self.out_dir / 'ablation.txt', text)
        return text.rstrip('\n')

    @track_performance('sweep_command')
    def sweep(self, kernels: Optional[Sequence[int]] = None, seeds: Optional[Sequence[int]] = None,
              timing: bool = True) -> str:
        table = self.ablation_service.sweep(kernels, seeds, timing)
        _write_text(self.out_dir / 'sweep.csv', table.to_csv())
        text = table.to_text()
        _write_text(self.out_dir / 'sweep.txt', text)
        return text.rstrip('\n')

    @track_performance('count_command')
    def count(self, length: int, variants: Optional[Sequence[TcmVariant]] = None) -> str:
        """各 TCM 模块的参数量与 MAC；--variant 只列出一种"""
        rows, text = self.ablation_service.count(length, variants)
        _write_text(self.out_dir / 'count.csv', TableBuilder.csv_table(
            ['variant', 'params', 'macs'], [[r['variant'], r['params'], r['macs']] for r in rows]
        ))
        return text.rstrip('\n')

    @track_performance('diag_command')
    def diag(self, features_path: str) -> str:
        """特征文件的余弦相似度矩阵，写为 CSV，并输出相邻 clip 的平均相似度"""
        x = storage_service.read_feature_file(features_path)
        matrix, adjacent = EvaluationService.similarity(x)
        target = self.out_dir / f"{Path(features_path).stem}_similarity.csv"
        _write_text(target, TableBuilder.matrix_csv(matrix))
        return (f"diag: T={x.shape[0]}, mean adjacent similarity {adjacent:.4f} "
                f"-> {target}")
