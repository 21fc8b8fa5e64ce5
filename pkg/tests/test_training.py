# tests/test_training.py
import numpy as np
import pytest

from models.run_config import ModelConfig, SyntheticDatasetSpec, TcmVariant, TrainConfig, run_config_manager
from services import training_service
from services.dataset_service import (LabeledVideo, attach_annotations, generate_synthetic_dataset,
                                      moving_average, split_dataset, to_annotation_set)
from services.evaluation_service import mean_adjacent_similarity, mean_ap
from services.inference_service import infer_dataset
from services.model_service import ModelParams, init_params
from services.training_service import (AdamState, TrainingService, adamw_step, clip_grad_norm, compute_gradients,
                                       ema_update, global_norm, pad_batch, train)
from utils.errors import InvalidArgumentError, NonFiniteGradientError, SamplingError


def _params(value):
    return ModelParams({'w': np.array([value], dtype=np.float64)})


# ---- optimizer ----

def test_adamw_first_step_moves_by_lr():
    config = TrainConfig(lr=0.1, weight_decay=0.0)
    params, state = adamw_step(_params(0.0), {'w': np.array([1.0])}, AdamState(), config)
    assert params['w'][0] == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1
    params, _ = adamw_step(_params(1.0), {'w': np.array([0.5])}, AdamState(), config)
    assert params['w'][0] == pytest.approx(0.9, rel=1e-6)


def test_adamw_decoupled_weight_decay():
    config = TrainConfig(lr=0.1, weight_decay=0.1)
    params, _ = adamw_step(_params(1.0), {'w': np.array([0.0])}, AdamState(), config)
    assert params['w'][0] == pytest.approx(0.99, rel=1e-12)


def test_adamw_zero_gradient_without_decay_is_noop():
    config = TrainConfig(lr=0.1, weight_decay=0.0)
    params, _ = adamw_step(_params(2.5), {'w': np.array([0.0])}, AdamState(), config)
    assert params['w'][0] == 2.5


def test_adamw_rejects_non_finite_gradient():
    with pytest.raises(NonFiniteGradientError) as excinfo:
        adamw_step(_params(1.0), {'w': np.array([np.nan])}, AdamState(), TrainConfig())
    assert 'w' in str(excinfo.value)


def test_clip_grad_norm():
    clipped = clip_grad_norm({'a': np.array([3.0, 4.0])}, 1.0)
    np.testing.assert_allclose(clipped['a'], [0.6, 0.8])
    small = {'a': np.array([0.3, 0.4])}
    assert clip_grad_norm(small, 1.0) is small
    assert global_norm({'a': np.array([3.0]), 'b': np.array([4.0])}) == pytest.approx(5.0)


def test_ema_update():
    assert ema_update(_params(1.0), _params(0.0), 0.75)['w'][0] == pytest.approx(0.75)
    assert ema_update(_params(1.0), _params(0.3), 0.0)['w'][0] == pytest.approx(0.3)
    with pytest.raises(InvalidArgumentError):
        ema_update(_params(1.0), _params(0.3), 1.0)


# ---- batching ----

def test_pad_batch(rng):
    videos = [LabeledVideo('a', rng.standard_normal((5, 2))), LabeledVideo('b', rng.standard_normal((8, 2)))]
    padded, valid = pad_batch(videos)
    assert [x.shape for x in padded] == [(8, 2), (8, 2)]
    assert valid == [5, 8]
    np.testing.assert_array_equal(padded[0][5:], 0.0)
    with pytest.raises(InvalidArgumentError):
        pad_batch(videos, pad_length=6)


@pytest.mark.parametrize('variant', list(TcmVariant))
def test_padding_does_not_change_gradients(variant, tiny_video):
    config = ModelConfig(input_dim=3, embed_dim=4, num_levels=3, num_classes=2, tcm_variant=variant)
    params = init_params(config, seed=4)
    plain, plain_grads = compute_gradients([tiny_video], params, config)
    padded, padded_grads = compute_gradients([tiny_video], params, config, pad_length=12)
    assert padded.value == pytest.approx(plain.value, rel=1e-12)
    assert padded.num_positive == plain.num_positive
    for name in params:
        np.testing.assert_allclose(padded_grads[name], plain_grads[name], rtol=1e-9, atol=1e-12)


# ---- training loop ----

def _small_dataset(run_config):
    return generate_synthetic_dataset(run_config.synth)


def test_zero_learning_rate_keeps_parameters(small_run_config):
    # 整个数据集作为一个批次，损失应保持不变
    train_config = small_run_config.train.model_copy(update={'lr': 0.0, 'batch_size': 3})
    init = init_params(small_run_config.model, train_config.seed)
    result = train(_small_dataset(small_run_config), small_run_config.model, train_config)
    for name in init:
        np.testing.assert_array_equal(result.raw_params[name], init[name])
        np.testing.assert_allclose(result.params[name], init[name], atol=1e-15)
    assert len(set(result.loss_history)) == 1


def test_training_is_deterministic(small_run_config):
    dataset = _small_dataset(small_run_config)
    first = train(dataset, small_run_config.model, small_run_config.train)
    second = train(dataset, small_run_config.model, small_run_config.train)
    assert first.loss_history == second.loss_history
    assert first.grad_norms == second.grad_norms
    for name in first.params:
        assert np.array_equal(first.params[name], second.params[name])


def test_train_reports_each_step(small_run_config, mocker):
    spy = mocker.spy(training_service, 'ema_update')
    seen = []
    result = train(_small_dataset(small_run_config), small_run_config.model, small_run_config.train,
                   on_step=lambda step, loss, norm: seen.append(step))
    assert seen == [0, 1, 2]
    assert len(result.loss_history) == len(result.grad_norms) == 3
    assert spy.call_count == 3
    assert training_service.loss_log_rows(result)[0][0] == 0


def test_kernel_one_maxpool_matches_subsample(small_run_config):
    dataset = _small_dataset(small_run_config)
    maxpool = small_run_config.model.model_copy(update={'tcm_variant': TcmVariant.MAXPOOL, 'tcm_kernel': 1})
    subsample = small_run_config.model.model_copy(update={'tcm_variant': TcmVariant.SUBSAMPLE})
    a = train(dataset, maxpool, small_run_config.train)
    b = train(dataset, subsample, small_run_config.train)
    assert a.loss_history == b.loss_history


def test_training_service_uses_run_config(small_run_config):
    videos = _small_dataset(small_run_config)
    service = TrainingService(small_run_config)
    direct = train(videos, small_run_config.model, small_run_config.train.model_copy(update={'seed': 3}),
                   small_run_config.assign, small_run_config.loss)
    assert service.fit(videos, seed=3).loss_history == direct.loss_history
    assert service.fit(videos).loss_history != direct.loss_history


def test_train_rejects_empty_dataset(small_run_config):
    with pytest.raises(InvalidArgumentError):
        train([], small_run_config.model, small_run_config.train)


@pytest.mark.slow
def test_overfits_tiny_dataset():
    run_config = run_config_manager.load('data/configs/overfit.json')
    videos = generate_synthetic_dataset(run_config.synth)
    result = train(videos, run_config.model, run_config.train, run_config.assign, run_config.loss)
    assert result.loss_history[-1] < 0.1 * result.loss_history[0]

    predictions = infer_dataset(videos, result.params, run_config.model, run_config.inference)
    report = mean_ap(predictions, to_annotation_set(videos), [0.3, 0.4, 0.5, 0.6, 0.7])
    assert report.average_map >= 0.90


# ---- synthetic dataset ----

def test_dataset_is_seeded():
    spec = SyntheticDatasetSpec(num_videos=3, length=128)
    a, b = generate_synthetic_dataset(spec), generate_synthetic_dataset(spec)
    for x, y in zip(a, b):
        assert x.video_id == y.video_id
        assert np.array_equal(x.features, y.features)
        assert x.instances == y.instances
    c = generate_synthetic_dataset(spec.model_copy(update={'seed': 1}))
    assert not np.array_equal(a[0].features, c[0].features)


def test_dataset_layout():
    spec = SyntheticDatasetSpec(num_videos=4, length=50, input_dim=6, num_classes=2, instances_per_video=(1, 3),
                                max_duration=10)
    videos = generate_synthetic_dataset(spec)
    assert [v.video_id for v in videos] == ['video_000', 'video_001', 'video_002', 'video_003']
    for video in videos:
        assert video.features.shape == (50, 6)
        assert 1 <= len(video.instances) <= 3
        spans = sorted((i.start, i.end) for i in video.instances)
        assert all(prev[1] <= cur[0] for prev, cur in zip(spans, spans[1:]))
        assert all(spec.min_duration <= i.duration <= spec.max_duration for i in video.instances)
        assert all(0 <= i.label < 2 for i in video.instances)


def test_noise_free_instance_clips_are_identical():
    spec = SyntheticDatasetSpec(num_videos=2, length=128, noise_scale=0.0, smoothing_width=1)
    for video in generate_synthetic_dataset(spec):
        for inst in video.instances:
            span = video.features[int(inst.start):int(inst.end)]
            assert np.array_equal(span, np.tile(span[0], (len(span), 1)))


def test_adjacent_clips_are_highly_similar():
    videos = generate_synthetic_dataset(SyntheticDatasetSpec(num_videos=3, length=128))
    assert all(mean_adjacent_similarity(v.features) > 0.9 for v in videos)


def test_impossible_placement_raises():
    spec = SyntheticDatasetSpec(num_videos=1, length=5, instances_per_video=(1, 1), min_duration=8,
                                max_duration=8, max_attempts=3)
    with pytest.raises(SamplingError):
        generate_synthetic_dataset(spec)


def test_moving_average_edges():
    x = np.array([[0.0], [3.0], [6.0], [9.0]])
    np.testing.assert_allclose(moving_average(x, 3)[:, 0], [1.5, 3.0, 6.0, 7.5])
    np.testing.assert_array_equal(moving_average(x, 1), x)


def test_split_and_attach(small_run_config):
    videos = _small_dataset(small_run_config)
    train_part, val_part = split_dataset(videos, 2)
    assert len(train_part) == 2 and len(val_part) == 1
    annotations = to_annotation_set(videos, num_classes=2)
    attached = attach_annotations({v.video_id: v.features for v in videos}, annotations)
    assert [v.video_id for v in attached] == [v.video_id for v in videos]
    with pytest.raises(InvalidArgumentError):
        attach_annotations({}, annotations)
    with pytest.raises(InvalidArgumentError):
        split_dataset(videos, 0)


def test_sparse_evidence_marks_key_clips():
    # 证据比例极小时每个实例只有一个被强制保留的关键 clip
    spec = SyntheticDatasetSpec(num_videos=3, length=64, noise_scale=0.0, smoothing_width=1, evidence_rate=1e-9)
    for video in generate_synthetic_dataset(spec):
        for inst in video.instances:
            span = video.features[int(inst.start):int(inst.end)]
            rows, counts = np.unique(span, axis=0, return_counts=True)
            assert len(rows) == 2
            assert sorted(counts) == [1, len(span) - 1]
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(evidence_rate=0.0)

