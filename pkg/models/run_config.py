# -*- coding: utf-8 -*-
"""
运行配置模型
一个 JSON 配置文件被所有子命令共享，按段落拆分为模型、标签分配、损失、训练、合成数据、推理、评估与消融设置
"""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

# 设置日志记录器
logger = logging.getLogger(__name__)


class TcmVariant(str, Enum):
    """金字塔层间的时间上下文建模（TCM）模块"""
    MAXPOOL = 'maxpool'
    AVGPOOL = 'avgpool'
    SUBSAMPLE = 'subsample'
    CONV = 'conv'
    ATTENTION = 'attention'


PARAMETER_FREE_VARIANTS = (TcmVariant.MAXPOOL, TcmVariant.AVGPOOL, TcmVariant.SUBSAMPLE)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ModelConfig(StrictModel):
    """TemporalMaxer 结构超参数"""
    input_dim: int = 16
    embed_dim: int = 64
    num_levels: int = 4
    tcm_variant: TcmVariant = TcmVariant.MAXPOOL
    tcm_kernel: int = 3
    num_classes: int = 3
    head_kernel: int = 3
    layer_norm_eps: float = 1e-5

    @field_validator('num_levels')
    def validate_levels(cls, v):
        if v < 2:
            raise ValueError('金字塔层数 num_levels 必须 >= 2')
        return v

    @field_validator('input_dim', 'embed_dim', 'num_classes', 'tcm_kernel', 'head_kernel')
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('维度与 kernel 必须 >= 1')
        return v

    @field_validator('head_kernel')
    def validate_head_kernel(cls, v):
        if v % 2 == 0:
            raise ValueError('head_kernel 必须为奇数，以保持各层长度不变')
        return v

    @property
    def strides(self) -> List[int]:
        """每一层相对输入的步长 2^(l-1)"""
        return [2 ** level for level in range(self.num_levels)]


class AssignConfig(StrictModel):
    """FCOS 风格的正样本分配参数"""
    center_radius: float = 1.5
    # 每层回归范围（输入时间步单位），上界为 None 表示无上限；为空时按层数自动生成
    regression_ranges: Optional[List[Tuple[float, Optional[float]]]] = None

    @field_validator('center_radius')
    def validate_radius(cls, v):
        if v <= 0:
            raise ValueError('center_radius 必须 > 0')
        return v

    def ranges_for(self, num_levels: int) -> List[Tuple[float, float]]:
        """返回 num_levels 个 [low, high) 区间，默认 [0,4), [4,8), [8,16) ...，最后一层无上限"""
        if self.regression_ranges is not None:
            if len(self.regression_ranges) != num_levels:
                raise ConfigError(
                    f"regression_ranges 有 {len(self.regression_ranges)} 项，但金字塔有 {num_levels} 层"
                )
            return [(float(lo), math.inf if hi is None else float(hi)) for lo, hi in self.regression_ranges]
        ranges = []
        for level in range(num_levels):
            low = 0.0 if level == 0 else float(2 ** (level + 1))
            high = float(2 ** (level + 2))
            ranges.append((low, high))
        ranges[-1] = (ranges[-1][0], math.inf)
        return ranges


class LossConfig(StrictModel):
    """Focal / DIoU 损失参数；focal_alpha 为 None 时关闭 alpha 加权"""
    focal_alpha: Optional[float] = 0.25
    focal_gamma: float = 2.0
    prob_clamp: float = 1e-12

    @field_validator('focal_alpha')
    def validate_alpha(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError('focal_alpha 必须位于 [0, 1]')
        return v

    @field_validator('focal_gamma')
    def validate_gamma(cls, v):
        if v < 0:
            raise ValueError('focal_gamma 必须 >= 0')
        return v


class TrainConfig(StrictModel):
    """优化器与训练循环设置"""
    steps: int = 300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.999
    batch_size: int = 4
    seed: int = 0
    # 训练时把批内视频填充到的固定长度；None 表示填充到批内最大长度
    pad_length: Optional[int] = None
    log_every: int = 50

    @field_validator('lr')
    def validate_lr(cls, v):
        if v < 0:
            raise ValueError('学习率不能为负')
        return v

    @field_validator('ema_decay')
    def validate_ema(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('ema_decay 必须位于 [0, 1)')
        return v

    @field_validator('grad_clip_norm')
    def validate_clip(cls, v):
        if v <= 0:
            raise ValueError('grad_clip_norm 必须 > 0')
        return v

    @field_validator('batch_size', 'log_every')
    def validate_count(cls, v):
        if v < 1:
            raise ValueError('必须 >= 1')
        return v

    @field_validator('steps')
    def validate_steps(cls, v):
        if v < 0:
            raise ValueError('steps 不能为负')
        return v


class SyntheticDatasetSpec(StrictModel):
    """合成数据集规格：相邻 clip 高度相似的特征序列"""
    num_videos: int = 8
    length: int = 128
    input_dim: int = 16
    num_classes: int = 3
    instances_per_video: Tuple[int, int] = (1, 3)
    min_duration: int = 4
    max_duration: int = 24
    prototype_scale: float = 1.0
    noise_scale: float = 0.3
    smoothing_width: int = 5
    # 动作片段内带类别原型的 clip 比例；小于 1 时其余 clip 只带类别无关的动作原型
    evidence_rate: float = 1.0
    seed: int = 0
    max_attempts: int = 50

    @field_validator('min_duration')
    def validate_min_duration(cls, v):
        if v < 2:
            raise ValueError('动作时长至少为 2')
        return v

    @field_validator('noise_scale')
    def validate_noise(cls, v):
        if v < 0:
            raise ValueError('noise_scale 不能为负')
        return v

    @field_validator('evidence_rate')
    def validate_evidence_rate(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError('evidence_rate 必须位于 (0, 1]')
        return v

    @field_validator('num_videos', 'length', 'input_dim', 'num_classes', 'smoothing_width', 'max_attempts')
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('必须 >= 1')
        return v

    @model_validator(mode='after')
    def validate_ranges(self):
        low, high = self.instances_per_video
        if low < 0 or high < low:
            raise ValueError('instances_per_video 需满足 0 <= low <= high')
        if self.max_duration < self.min_duration:
            raise ValueError('max_duration 必须 >= min_duration')
        return self


class NmsMode(str, Enum):
    SOFT = 'soft'
    HARD = 'hard'


class InferenceConfig(StrictModel):
    """解码与去重参数"""
    score_threshold: float = 0.01
    pre_nms_topk: int = 1000
    nms_mode: NmsMode = NmsMode.SOFT
    sigma: float = 0.5
    iou_threshold: float = 0.5
    min_score: float = 0.001
    max_segments: int = 100

    @field_validator('score_threshold')
    def validate_threshold(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError('score_threshold 必须位于 [0, 1]')
        return v

    @field_validator('sigma')
    def validate_sigma(cls, v):
        if v <= 0:
            raise ValueError('sigma 必须 > 0')
        return v


class EvalConfig(StrictModel):
    # THUMOS 惯例 [0.3:0.7:0.1]
    tiou_thresholds: List[float] = [0.3, 0.4, 0.5, 0.6, 0.7]

    @field_validator('tiou_thresholds')
    def validate_thresholds(cls, v):
        if not v or any(not 0.0 < t <= 1.0 for t in v):
            raise ValueError('tIoU 阈值必须非空且位于 (0, 1]')
        return v


class AblationConfig(StrictModel):
    """消融实验与 kernel 扫描设置"""
    variants: List[TcmVariant] = [
        TcmVariant.CONV, TcmVariant.SUBSAMPLE, TcmVariant.AVGPOOL,
        TcmVariant.ATTENTION, TcmVariant.MAXPOOL,
    ]
    kernels: List[int] = [3, 4, 5, 6]
    seeds: List[int] = [0, 1, 2, 3, 4]
    train_videos: int = 12
    val_videos: int = 6
    timing_length: int = 2304
    timing_repeats: int = 3

    @field_validator('seeds')
    def validate_seeds(cls, v):
        if not v:
            raise ValueError('至少需要一个随机种子')
        return v


class RunConfig(StrictModel):
    """完整运行配置"""
    model: ModelConfig = ModelConfig()
    assign: AssignConfig = AssignConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    synth: SyntheticDatasetSpec = SyntheticDatasetSpec()
    inference: InferenceConfig = InferenceConfig()
    eval: EvalConfig = EvalConfig()
    ablation: AblationConfig = AblationConfig()


def format_validation_error(error: ValidationError) -> str:
    """把 pydantic 错误压成一行：字段路径 + 原因"""
    parts = []
    for item in error.errors():
        path = '.'.join(str(p) for p in item.get('loc', ())) or '<root>'
        parts.append(f"{path}: {item.get('msg')}")
    return '; '.join(parts)


class RunConfigManager:
    """运行配置的加载与保存"""

    def load(self, path: Optional[str]) -> RunConfig:
        """读取配置文件；path 为空时返回默认配置"""
        if not path:
            return RunConfig()
        config_file = Path(path)
        try:
            with open(config_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"配置文件不存在: {config_file}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件 {config_file} 不是合法 JSON: {e}")
        try:
            config = RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"配置文件 {config_file} 校验失败: {format_validation_error(e)}")
        logger.info(f"已加载运行配置: {config_file}")
        return config

    def save(self, config: RunConfig, path: str) -> None:
        config_file = Path(path)
        config_file.parent.mkdir(parents=True, exist_ok=True)
        with open(config_file, 'w', encoding='utf-8') as f:
            json.dump(config.model_dump(mode='json'), f, ensure_ascii=False, indent=2, sort_keys=True)


# 全局配置管理器实例
run_config_manager = RunConfigManager()
