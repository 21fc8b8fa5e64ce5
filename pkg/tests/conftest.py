# tests/conftest.py
import numpy as np
import pytest

from models.records import ActionInstance
from models.run_config import (AblationConfig, InferenceConfig, ModelConfig, RunConfig, SyntheticDatasetSpec,
                               TrainConfig)
from services.dataset_service import LabeledVideo


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """T=8, D=4, C=2, L=3 规模的模型"""
    return ModelConfig(input_dim=3, embed_dim=4, num_levels=3, num_classes=2)


@pytest.fixture
def tiny_video(rng):
    return LabeledVideo(
        'tiny',
        rng.standard_normal((8, 3)),
        [ActionInstance(start=1.0, end=6.0, label=1), ActionInstance(start=5.0, end=7.0, label=0)],
    )


@pytest.fixture
def small_run_config():
    """几步就能跑完的完整运行配置"""
    return RunConfig(
        model=ModelConfig(input_dim=8, embed_dim=8, num_levels=3, num_classes=2),
        train=TrainConfig(steps=3, lr=1e-2, batch_size=2, ema_decay=0.5, log_every=1),
        synth=SyntheticDatasetSpec(num_videos=3, length=32, input_dim=8, num_classes=2,
                                   instances_per_video=(1, 2), min_duration=4, max_duration=8),
        inference=InferenceConfig(score_threshold=0.0, max_segments=20),
        ablation=AblationConfig(variants=['maxpool', 'subsample'], kernels=[3, 4], seeds=[0, 1],
                                train_videos=2, val_videos=1, timing_length=64, timing_repeats=1),
    )
