# -*- coding: utf-8 -*-
"""
文件存储服务
特征文件 TMXF（小端二进制）、检查点 TMXC、标注与预测（JSON）、评估报告
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from models.records import (ActionInstance, AnnotationDocument, AnnotationSet, EvalReport, PredictionSet,
                            ScoredSegment, VideoAnnotation)
from models.run_config import RunConfig, format_validation_error
from services.model_service import ModelParams
from utils.errors import AnnotationError, ConfigError, FeatureFileError, InvalidArgumentError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_MAGIC = b'TMXF'
CHECKPOINT_MAGIC = b'TMXC'
FORMAT_VERSION = 1
FEATURE_HEADER = struct.Struct('<4sIII')
FEATURE_SUFFIX = '.tmxf'
PAYLOAD_DTYPE = np.dtype('<f4')


class _ByteReader:
    """带偏移量的顺序读取器，越界时抛出带字节偏移的错误"""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        available = len(self.data) - self.offset
        if available < size:
            raise FeatureFileError(
                f"{self.source}: {what} 需要 {size} 字节，实际只有 {available} 字节", self.offset
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack('<I', self.take(4, what))[0]

    def magic(self, expected: bytes) -> None:
        start = self.offset
        found = self.take(len(expected), 'magic')
        if found != expected:
            raise FeatureFileError(f"{self.source}: magic 应为 {expected!r}，实际为 {found!r}", start)

    def version(self) -> None:
        start = self.offset
        version = self.u32('version')
        if version != FORMAT_VERSION:
            raise FeatureFileError(f"{self.source}: 不支持的版本 {version}", start)

    def floats(self, count: int, what: str) -> np.ndarray:
        start = self.offset
        values = np.frombuffer(self.take(count * PAYLOAD_DTYPE.itemsize, what), dtype=PAYLOAD_DTYPE)
        bad = np.nonzero(~np.isfinite(values))[0]
        if len(bad):
            raise FeatureFileError(f"{self.source}: {what} 含有非有限值",
                                   start + int(bad[0]) * PAYLOAD_DTYPE.itemsize)
        return values.astype(np.float64)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FeatureFileError(
                f"{self.source}: 文件末尾多出 {len(self.data) - self.offset} 字节", self.offset
            )


def _to_payload(values: np.ndarray, what: str) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise InvalidArgumentError(f"{what} 含有非有限值，无法写入")
    narrowed = values.astype(PAYLOAD_DTYPE)
    if not np.isfinite(narrowed).all():
        raise InvalidArgumentError(f"{what} 超出 32 位浮点数范围")
    return narrowed.tobytes()


def _write_bytes(path: PathLike, data: bytes) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'wb') as f:
        f.write(data)


def _write_json(path: PathLike, document) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(document, f, ensure_ascii=False, indent=2)
        f.write('\n')


def _read_json(path: PathLike, error_type):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise error_type(f"文件不存在: {path}")
    except json.JSONDecodeError as e:
        raise error_type(f"{path} 不是合法 JSON: {e}")


# ---- 特征文件 ----

def encode_features(seq) -> bytes:
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidArgumentError(f"特征必须是非空二维数组 (T, D)，实际形状 {x.shape}")
    header = FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, x.shape[0], x.shape[1])
    return header + _to_payload(x, '特征')


def decode_features(data: bytes, source: str = '<bytes>') -> np.ndarray:
    reader = _ByteReader(data, source)
    reader.magic(FEATURE_MAGIC)
    reader.version()
    length = reader.u32('T')
    dim = reader.u32('D')
    if length < 1 or dim < 1:
        raise FeatureFileError(f"{source}: 非法形状 T={length}, D={dim}", 8)
    expected = length * dim * PAYLOAD_DTYPE.itemsize
    actual = len(data) - FEATURE_HEADER.size
    if actual != expected:
        raise FeatureFileError(
            f"{source}: payload 应为 {expected} 字节 (T={length}, D={dim})，实际为 {actual} 字节",
            FEATURE_HEADER.size,
        )
    values = reader.floats(length * dim, 'payload')
    reader.finish()
    return values.reshape(length, dim)


def write_feature_file(path: PathLike, seq) -> None:
    _write_bytes(path, encode_features(seq))


def read_feature_file(path: PathLike) -> np.ndarray:
    """读取 TMXF 文件，返回 float64 的 (T, D) 数组

    Raises:
        FeatureFileError: magic/版本错误、长度不符或含非有限值，信息中带字节偏移
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise FeatureFileError(f"特征文件不存在: {path}")
    return decode_features(data, str(path))


def write_feature_dir(directory: PathLike, features: Dict[str, np.ndarray]) -> List[Path]:
    root = Path(directory)
    paths = []
    for video_id, x in features.items():
        path = root / f"{video_id}{FEATURE_SUFFIX}"
        write_feature_file(path, x)
        paths.append(path)
    logger.info(f"写入 {len(paths)} 个特征文件到 {root}")
    return paths


def read_feature_dir(directory: PathLike) -> Dict[str, np.ndarray]:
    """读取目录下全部 *.tmxf，文件名（去掉后缀）即视频 id"""
    root = Path(directory)
    if not root.is_dir():
        raise FeatureFileError(f"特征目录不存在: {root}")
    features = {path.stem: read_feature_file(path) for path in sorted(root.glob(f"*{FEATURE_SUFFIX}"))}
    if not features:
        raise FeatureFileError(f"特征目录 {root} 中没有 {FEATURE_SUFFIX} 文件")
    return features


# ---- 标注与预测 ----

def annotations_from_document(data) -> AnnotationSet:
    try:
        document = AnnotationDocument.model_validate(data)
    except ValidationError as e:
        raise AnnotationError(f"标注校验失败: {format_validation_error(e)}")

    index = {name: i for i, name in enumerate(document.classes)}
    videos = []
    for v, video in enumerate(document.videos):
        instances = []
        for n, inst in enumerate(video.instances):
            where = f"videos.{v}.instances.{n}"
            if inst.label not in index:
                raise AnnotationError(f"{where}.label: 未知类别 {inst.label!r}")
            if inst.end > video.num_clips:
                raise AnnotationError(f"{where}.end: {inst.end} 超出 num_clips {video.num_clips}")
            instances.append(ActionInstance(start=inst.start, end=inst.end, label=index[inst.label]))
        videos.append(VideoAnnotation(id=video.id, num_clips=video.num_clips, instances=instances))
    ids = [video.id for video in videos]
    if len(set(ids)) != len(ids):
        raise AnnotationError("videos: 视频 id 不能重复")
    return AnnotationSet(version=document.version, classes=list(document.classes), videos=videos)


def annotations_to_document(annotations: AnnotationSet) -> dict:
    return {
        'version': annotations.version,
        'classes': list(annotations.classes),
        'videos': [
            {
                'id': video.id,
                'num_clips': video.num_clips,
                'instances': [
                    {'start': inst.start, 'end': inst.end, 'label': annotations.classes[inst.label]}
                    for inst in video.instances
                ],
            }
            for video in annotations.videos
        ],
    }


def parse_annotations(path: PathLike) -> AnnotationSet:
    """读取并严格校验标注文件；错误信息包含字段路径"""
    annotations = annotations_from_document(_read_json(path, AnnotationError))
    logger.info(f"已加载标注 {path}: {len(annotations.videos)} 段视频, {len(annotations.classes)} 个类别")
    return annotations


def write_annotations(path: PathLike, annotations: AnnotationSet) -> None:
    _write_json(path, annotations_to_document(annotations))


def write_predictions(path: PathLike, segments: Sequence[ScoredSegment]) -> None:
    document = PredictionSet(version=1, segments=list(segments))
    _write_json(path, document.model_dump(mode='json'))
    logger.info(f"写入 {len(segments)} 个预测片段到 {path}")


def read_predictions(path: PathLike) -> List[ScoredSegment]:
    data = _read_json(path, AnnotationError)
    try:
        document = PredictionSet.model_validate(data)
    except ValidationError as e:
        raise AnnotationError(f"预测文件 {path} 校验失败: {format_validation_error(e)}")
    if document.version != 1:
        raise AnnotationError(f"version: 不支持的预测文件版本 {document.version}")
    return list(document.segments)


def write_report(path: PathLike, report: EvalReport) -> None:
    _write_json(path, report.model_dump(mode='json'))


# ---- 检查点 ----

def encode_checkpoint(config: RunConfig, params: ModelParams) -> bytes:
    config_bytes = json.dumps(config.model_dump(mode='json'), sort_keys=True).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<II', FORMAT_VERSION, len(config_bytes)), config_bytes,
             struct.pack('<I', len(params))]
    for name, value in params.items():
        name_bytes = name.encode('utf-8')
        parts.append(struct.pack('<I', len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack(f'<I{value.ndim}I', value.ndim, *value.shape))
        parts.append(_to_payload(value, f"参数 {name}"))
    return b''.join(parts)


def decode_checkpoint(data: bytes, source: str = '<bytes>') -> Tuple[RunConfig, ModelParams]:
    reader = _ByteReader(data, source)
    reader.magic(CHECKPOINT_MAGIC)
    reader.version()
    config_length = reader.u32('配置长度')
    config_offset = reader.offset
    raw_config = reader.take(config_length, '配置 JSON')
    try:
        config = RunConfig.model_validate(json.loads(raw_config.decode('utf-8')))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FeatureFileError(f"{source}: 配置 JSON 无法解析: {e}", config_offset)
    except ValidationError as e:
        raise ConfigError(f"{source}: 检查点中的配置校验失败: {format_validation_error(e)}")

    tensors = {}
    for _ in range(reader.u32('张量数量')):
        name_offset = reader.offset
        try:
            name = reader.take(reader.u32('名称长度'), '张量名称').decode('utf-8')
        except UnicodeDecodeError:
            raise FeatureFileError(f"{source}: 张量名称不是合法 UTF-8", name_offset)
        ndim = reader.u32(f'{name} 维数')
        shape = tuple(reader.u32(f'{name} 形状') for _ in range(ndim))
        tensors[name] = reader.floats(int(np.prod(shape, dtype=np.int64)), name).reshape(shape)
    reader.finish()
    return config, ModelParams(tensors)


def write_checkpoint(path: PathLike, config: RunConfig, params: ModelParams) -> None:
    _write_bytes(path, encode_checkpoint(config, params))
    logger.info(f"写入检查点 {path}: {len(params)} 个参数张量")


def read_checkpoint(path: PathLike) -> Tuple[RunConfig, ModelParams]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise FeatureFileError(f"检查点不存在: {path}")
    return decode_checkpoint(data, str(path))


def write_loss_log(path: PathLike, rows: Sequence[Tuple[int, float, float]]) -> None:
    """CSV: step,loss,grad_norm"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, 'w', encoding='utf-8') as f:
        f.write('step,loss,grad_norm\n')
        for step, loss, norm in rows:
            f.write(f"{step},{float(loss)!r},{float(norm)!r}\n")
