"""
Training Tests
==============

Configuration overlays, determinism, PEFT freezing, checkpoints, resume and
the batch prefetcher.

Usage:
    pytest test_training.py
    pytest test_training.py --slow
"""

import sys
sys.dont_write_bytecode = True

import json
import os
import threading

import numpy as np
import pytest

from conftest import tiny_world_config
from exceptions import CheckpointError, ConfigError, ValidationError
from prefetcher import Prefetcher
from training import (
    TrainConfig,
    assemble_batch,
    blob_path,
    load_checkpoint,
    load_model,
    save_checkpoint,
    train,
)


def _with(config, **overrides):
    return TrainConfig.from_dict(overrides, base=config)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_testing_profile_matches_tiny_world(train_config):
    assert train_config.batch_size == 4
    assert train_config.model.text_dim == 8
    assert train_config.model.image.size == 8
    train_config.validate()


def test_from_dict_rejects_unknown_keys(train_config):
    with pytest.raises(ConfigError, match='unknown training config keys'):
        TrainConfig.from_dict({'momentum': 0.9}, base=train_config)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'model': {'image': {'depth': 3}}}, base=train_config)


@pytest.mark.parametrize('model', [3, 'desk', [1, 2]])
def test_from_dict_rejects_non_object_model(train_config, model):
    with pytest.raises(ConfigError, match='model config must be an object'):
        TrainConfig.from_dict({'model': model}, base=train_config)


def test_from_dict_merges_nested_model(train_config):
    config = TrainConfig.from_dict({'lr': 0.5, 'model': {'embed_dim': 16, 'image': {'feature_dim': 12}}},
                                   base=train_config)
    assert config.lr == 0.5
    assert config.model.embed_dim == 16
    assert config.model.image.feature_dim == 12
    assert config.model.image.widths == (4, 4)


def test_validate_rejects_bad_values(train_config):
    for overrides in ({'peft': 'lora'}, {'crop_size': 9}, {'temperature': 0.0}, {'max_steps': 0}):
        with pytest.raises(ConfigError):
            _with(train_config, **overrides).validate()
    with pytest.raises(ConfigError):
        _with(train_config, use_image_aug=False, use_text=False, use_location=False).validate()


def test_loss_config_follows_modality_switches(train_config):
    weights = _with(train_config, use_location=False).loss_config().weights()
    assert weights == {'image': 1.0, 'text': 1.0, 'location': 0.0}


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def test_batch_is_deterministic_per_position(train_config, tiny_samples):
    first = assemble_batch(tiny_samples, [0, 1, 2, 3], train_config, epoch=0, step=0)
    again = assemble_batch(tiny_samples, [0, 1, 2, 3], train_config, epoch=0, step=0)
    later = assemble_batch(tiny_samples, [0, 1, 2, 3], train_config, epoch=1, step=0)
    assert first.pixels_b.tobytes() == again.pixels_b.tobytes()
    assert first.pixels_b.tobytes() != later.pixels_b.tobytes()
    assert first.pixels_a.shape == (4, 3, 8, 8)
    assert first.sinusoids.shape == (4, 4)
    assert first.covariates.shape == (4, 20)
    assert first.text.shape == (4, 8)


def test_dataset_smaller_than_batch(train_config, tiny_samples):
    with pytest.raises(ValidationError, match='smaller than one batch'):
        train(train_config, tiny_samples[:3])


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_training_is_deterministic(train_config, tiny_samples):
    config = _with(train_config, max_steps=3)
    a = train(config, tiny_samples)
    b = train(config, tiny_samples)
    assert a.params.digest() == b.params.digest()
    assert a.step_losses == b.step_losses
    assert all(np.isfinite(a.step_losses))


def test_seed_changes_the_run(train_config, tiny_samples):
    a = train(_with(train_config, max_steps=2), tiny_samples)
    b = train(_with(train_config, max_steps=2, seed=1), tiny_samples)
    assert a.params.digest() != b.params.digest()


def test_scale_shift_freezes_image_kernels(train_config, tiny_samples):
    config = _with(train_config, max_steps=3, peft='scale_shift')
    from encoders import init_parameters
    initial = init_parameters(config.model, config.seed)
    ckpt = train(config, tiny_samples)
    for name in ckpt.params.names():
        if name.startswith('image.conv') or name.startswith('image.fc'):
            assert ckpt.params[name].tobytes() == initial[name].tobytes(), name
    assert ckpt.params['heads.image'].tobytes() != initial['heads.image'].tobytes()
    assert ckpt.params['image.norm1.gamma'].tobytes() != initial['image.norm1.gamma'].tobytes()


def test_frozen_location_encoder(train_config, tiny_samples):
    config = _with(train_config, max_steps=2, peft='scale_shift', freeze_location=True)
    from encoders import init_parameters
    initial = init_parameters(config.model, config.seed)
    ckpt = train(config, tiny_samples)
    assert ckpt.params.digest('location.') == initial.digest('location.')


def test_epoch_accounting(train_config, tiny_samples):
    config = _with(train_config, epochs=2)
    ckpt = train(config, tiny_samples)
    steps_per_epoch = len(tiny_samples) // config.batch_size
    assert ckpt.epoch == 2
    assert len(ckpt.loss_history) == 2
    assert len(ckpt.step_losses) == 2 * steps_per_epoch
    assert ckpt.loss_history[0] == pytest.approx(np.mean(ckpt.step_losses[:steps_per_epoch]))
    assert ckpt.rng_state == {'seed': 0, 'epoch': 2, 'step_in_epoch': 0, 'global_step': 2 * steps_per_epoch}
    assert ckpt.adam.t == 2 * steps_per_epoch


def test_without_image_term(train_config, tiny_samples):
    ckpt = train(_with(train_config, max_steps=2, use_image_aug=False), tiny_samples)
    assert len(ckpt.step_losses) == 2


def test_prefetch_matches_serial(train_config, tiny_samples):
    serial = train(_with(train_config, max_steps=4, prefetch=0), tiny_samples)
    threaded = train(_with(train_config, max_steps=4, prefetch=2), tiny_samples)
    assert serial.params.digest() == threaded.params.digest()
    assert serial.step_losses == threaded.step_losses


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(5))
def test_loss_decreases(train_config, seed):
    from geodata import pair_samples
    from instance.seeds.world import generate_synthetic_world

    world = generate_synthetic_world(tiny_world_config(seed=seed, observations=200))
    samples = pair_samples(world.observations, world.tiles, world.texts, world.raster, seed=seed).samples
    assert len(samples) == 200
    ckpt = train(_with(train_config, batch_size=16, max_steps=50, epochs=10, lr=1e-2, seed=seed), samples)
    losses = ckpt.step_losses
    assert len(losses) == 50
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@pytest.fixture
def short_run(train_config, tiny_samples):
    return train(_with(train_config, max_steps=3), tiny_samples)


def test_checkpoint_round_trip(short_run, tmp_path):
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(short_run, path)
    assert os.path.exists(blob_path(path))
    loaded = load_checkpoint(path)
    assert loaded.params.digest() == short_run.params.digest()
    for name in short_run.params.buffer_names():
        assert loaded.params.buffer(name).tobytes() == short_run.params.buffer(name).tobytes()
    assert loaded.adam.t == short_run.adam.t
    for name, moment in short_run.adam.m.items():
        assert loaded.adam.m[name].tobytes() == moment.tobytes()
    assert loaded.rng_state == short_run.rng_state
    assert loaded.step_losses == short_run.step_losses
    assert loaded.config.to_dict() == short_run.config.to_dict()


def test_checkpoint_header_layout(short_run, tmp_path):
    path = tmp_path / 'ckpt.json'
    save_checkpoint(short_run, str(path))
    header = json.loads(path.read_text(encoding='utf-8'))
    assert header['version'] == 1
    assert header['dtype'] == 'f64le'
    assert header['names'][:len(short_run.params)] == short_run.params.names()
    sizes = sum(int(np.prod(shape)) for shape in header['shapes'])
    assert os.path.getsize(blob_path(str(path))) == 8 * sizes


def test_truncated_blob(short_run, tmp_path):
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(short_run, path)
    with open(blob_path(path), 'r+b') as handle:
        handle.truncate(os.path.getsize(blob_path(path)) - 8)
    with pytest.raises(CheckpointError, match='blob length mismatch'):
        load_checkpoint(path)


def test_unsupported_version(short_run, tmp_path):
    path = tmp_path / 'ckpt.json'
    save_checkpoint(short_run, str(path))
    header = json.loads(path.read_text(encoding='utf-8'))
    header['version'] = 2
    path.write_text(json.dumps(header), encoding='utf-8')
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(str(path))
    assert info.value.field == 'version'


def test_shape_mismatch_is_reported(short_run, tmp_path):
    path = tmp_path / 'ckpt.json'
    save_checkpoint(short_run, str(path))
    header = json.loads(path.read_text(encoding='utf-8'))
    header['config']['model']['embed_dim'] = 16
    path.write_text(json.dumps(header), encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_load_model_encodes(short_run, tmp_path, tiny_samples):
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(short_run, path)
    model, ckpt = load_model(path)
    assert model.encode_image(tiny_samples[0].tile_a.pixels).shape == (8,)
    assert ckpt.epoch == short_run.epoch


def test_resume_matches_straight_run(train_config, tiny_samples, tmp_path):
    straight = train(_with(train_config, max_steps=6), tiny_samples)
    path = str(tmp_path / 'ckpt.json')
    save_checkpoint(train(_with(train_config, max_steps=3), tiny_samples), path)
    resumed = train(_with(train_config, max_steps=6), tiny_samples, resume=load_checkpoint(path))
    assert resumed.params.digest() == straight.params.digest()
    assert resumed.step_losses == straight.step_losses
    assert resumed.rng_state == straight.rng_state


def test_resume_rejects_other_model(train_config, tiny_samples, short_run):
    config = TrainConfig.from_dict({'model': {'embed_dim': 16}}, base=train_config)
    with pytest.raises(CheckpointError):
        train(config, tiny_samples, resume=short_run)


# ---------------------------------------------------------------------------
# Prefetcher
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('depth', [0, 1, 3])
def test_prefetcher_preserves_order(depth):
    assert list(Prefetcher(range(20), lambda job: job * job, depth=depth)) == [j * j for j in range(20)]


def test_prefetcher_runs_off_thread():
    main = threading.get_ident()
    seen = list(Prefetcher(range(3), lambda job: threading.get_ident(), depth=2))
    assert all(ident != main for ident in seen)


def test_prefetcher_reraises_in_position():
    def build(job):
        if job == 3:
            raise ValueError('bad job 3')
        return job

    received = []
    with pytest.raises(ValueError, match='bad job 3'):
        for item in Prefetcher(range(6), build, depth=2):
            received.append(item)
    assert received == [0, 1, 2]


def test_prefetcher_stops_early():
    prefetcher = Prefetcher(range(1000), lambda job: job, depth=2)
    for item in prefetcher:
        if item == 5:
            break
    prefetcher.close()
    assert prefetcher._thread is None


# ---------------------------------------------------------------------------
# Full-objective gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('seed', range(20))
def test_full_objective_matches_finite_differences(seed):
    from cli import run_gradcheck
    report = run_gradcheck(seed, tolerance=1e-4, max_coords=150)
    assert report.passed, report.failures[:3]
    assert report.checked > 0
