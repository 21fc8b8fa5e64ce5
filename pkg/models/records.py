# models/records.py
from typing import Dict, List

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class ActionInstance(BaseModel):
    """真实动作片段 (start, end, label)，单位为 clip 网格"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    start: float
    end: float
    label: int

    @field_validator('start')
    def validate_start(cls, v):
        if v < 0:
            raise ValueError('start 不能为负')
        return v

    @field_validator('label')
    def validate_label(cls, v):
        if v < 0:
            raise ValueError('label 不能为负')
        return v

    @model_validator(mode='after')
    def validate_order(self):
        if not self.start < self.end:
            raise ValueError('start 必须小于 end')
        return self

    @property
    def duration(self) -> float:
        return self.end - self.start


class VideoAnnotation(BaseModel):
    model_config = ConfigDict(extra='forbid')

    id: str
    num_clips: int
    instances: List[ActionInstance] = []


class AnnotationSet(BaseModel):
    """解析后的标注集合，label 已转换为类别下标"""
    model_config = ConfigDict(extra='forbid')

    version: int = 1
    classes: List[str]
    videos: List[VideoAnnotation]

    def ground_truth(self) -> Dict[str, List[ActionInstance]]:
        return {video.id: list(video.instances) for video in self.videos}


class ScoredSegment(BaseModel):
    """解码后的预测片段"""
    model_config = ConfigDict(extra='forbid', frozen=True)

    video_id: str
    start: float
    end: float
    label: int
    score: float

    @field_validator('score')
    def validate_score(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError('score 必须位于 [0, 1]')
        return v

    @model_validator(mode='after')
    def validate_order(self):
        if not self.start < self.end:
            raise ValueError('start 必须小于 end')
        return self


class PredictionSet(BaseModel):
    """预测文件内容"""
    model_config = ConfigDict(extra='forbid')

    version: int = 1
    segments: List[ScoredSegment] = []


class EvalReport(BaseModel):
    """tIoU-mAP 评估结果"""
    model_config = ConfigDict(extra='forbid')

    tiou_thresholds: List[float]
    # 类别下标 -> 各阈值下的 AP
    per_class_ap: Dict[int, List[float]]
    map_per_threshold: List[float]
    average_map: float
    num_ground_truth: int
    num_predictions: int

    def map_at(self, threshold: float) -> float:
        for t, value in zip(self.tiou_thresholds, self.map_per_threshold):
            if abs(t - threshold) < 1e-9:
                return value
        raise KeyError(threshold)


class InstanceRecord(BaseModel):
    """标注文件中的单个实例（label 为类别名）"""
    model_config = ConfigDict(extra='forbid')

    start: float
    end: float
    label: str

    @field_validator('start')
    def validate_start(cls, v):
        if v < 0:
            raise ValueError('start 不能为负')
        return v

    @field_validator('end')
    def validate_end(cls, v, info):
        start = info.data.get('start')
        if start is not None and not start < v:
            raise ValueError(f'start ({start}) 必须小于 end ({v})')
        return v


class VideoRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    id: str
    num_clips: int
    instances: List[InstanceRecord] = []

    @field_validator('num_clips')
    def validate_num_clips(cls, v):
        if v < 1:
            raise ValueError('num_clips 必须 >= 1')
        return v


class AnnotationDocument(BaseModel):
    """标注文件的 schema（version 1）"""
    model_config = ConfigDict(extra='forbid')

    version: int
    classes: List[str]
    videos: List[VideoRecord]

    @field_validator('version')
    def validate_version(cls, v):
        if v != 1:
            raise ValueError(f'不支持的标注版本: {v}')
        return v

    @field_validator('classes')
    def validate_classes(cls, v):
        if not v:
            raise ValueError('类别列表不能为空')
        if len(set(v)) != len(v):
            raise ValueError('类别名不能重复')
        return v
