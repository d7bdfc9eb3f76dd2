"""
Training
========

Joint optimization of the image encoder, the location encoder and the five
projection heads against the three-term contrastive objective, plus
checkpoint persistence.

Randomness is counter based: the epoch permutation draws from
``default_rng([seed, epoch])`` and the augmentation of batch slot ``j`` at
step ``s`` from ``default_rng([seed, epoch, s, j])``. A resumed run therefore
only needs the position (epoch, step) to continue bit-identically.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from config import get_config
from contrastive import LossConfig, wildsat_loss_node
from encoders import (
    ImageEncoderConfig,
    LocationEncoderConfig,
    ModelConfig,
    PeftMode,
    WildsatModel,
    init_parameters,
    location_features,
    trainable_mask,
)
from exceptions import CheckpointError, ConfigError, ShapeError, TrainingDivergedError, ValidationError
from extensions import atomic_write_bytes, atomic_write_text, get_logger
from geodata import augment_geometric, augment_photometric
from numerics import AdamState, ParameterStore, Tape, adam_step, backward
from prefetcher import Prefetcher

logger = get_logger('training')

CHECKPOINT_VERSION = 1
BLOB_DTYPE = '<f8'


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-4
    temperature: float = 0.07
    peft: str = 'full'
    freeze_location: bool = False
    seed: int = 0
    crop_size: int = 24
    jitter: float = 0.05
    channel_mix: float = 0.1
    matching_radius: float = 0.05
    max_steps: int | None = None
    use_text: bool = True
    use_location: bool = True
    use_image_aug: bool = True
    prefetch: int = 2
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_profile(cls, profile=None):
        cfg = get_config(profile)
        model = ModelConfig(
            image=ImageEncoderConfig(size=cfg.IMAGE_SIZE, widths=tuple(cfg.IMAGE_WIDTHS),
                                     feature_dim=cfg.IMAGE_FEATURE_DIM),
            location=LocationEncoderConfig(hidden=cfg.LOCATION_HIDDEN, depth=cfg.LOCATION_DEPTH,
                                           output_dim=cfg.LOCATION_DIM),
            embed_dim=cfg.EMBED_DIM,
            text_dim=cfg.TEXT_DIM,
        )
        return cls(epochs=cfg.EPOCHS, batch_size=cfg.BATCH_SIZE, lr=cfg.LEARNING_RATE,
                   temperature=cfg.TEMPERATURE, seed=cfg.SEED, crop_size=min(cfg.CROP_SIZE, cfg.IMAGE_SIZE),
                   jitter=cfg.JITTER, channel_mix=cfg.CHANNEL_MIX, matching_radius=cfg.MATCHING_RADIUS,
                   prefetch=cfg.PREFETCH, model=model)

    @classmethod
    def from_dict(cls, payload, base=None):
        """Overlay `payload` on `base` (default: the active profile). Unknown keys are rejected."""
        merged = (base or cls.from_profile()).to_dict()
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f'unknown training config keys: {sorted(unknown)}')
        for key, value in payload.items():
            if key == 'model':
                if not isinstance(value, dict):
                    raise ConfigError(f'model config must be an object, got {type(value).__name__}')
                for section, sub in value.items():
                    if isinstance(sub, dict) and isinstance(merged['model'].get(section), dict):
                        unknown = set(sub) - set(merged['model'][section])
                        if unknown:
                            raise ConfigError(f'unknown model.{section} keys: {sorted(unknown)}')
                        merged['model'][section].update(sub)
                    elif section in merged['model']:
                        merged['model'][section] = sub
                    else:
                        raise ConfigError(f'unknown model key {section!r}')
            else:
                merged[key] = value
        merged['model'] = ModelConfig.from_dict(merged['model'])
        return cls(**merged)

    def to_dict(self):
        payload = {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'model'}
        payload['model'] = self.model.to_dict()
        return payload

    def loss_config(self):
        return LossConfig(temperature=self.temperature,
                          image_weight=1.0 if self.use_image_aug else 0.0,
                          text_weight=1.0 if self.use_text else 0.0,
                          location_weight=1.0 if self.use_location else 0.0)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch_size must be at least 1')
        if not (self.lr > 0 and self.temperature > 0):
            raise ConfigError('lr and temperature must be positive')
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError('max_steps must be at least 1')
        try:
            PeftMode(self.peft)
        except ValueError:
            raise ConfigError(f'unknown PEFT mode {self.peft!r}') from None
        if not 1 <= self.crop_size <= self.model.image.size:
            raise ConfigError(f'crop_size {self.crop_size} must lie in [1, {self.model.image.size}]')
        if self.jitter < 0 or self.channel_mix < 0 or self.matching_radius <= 0:
            raise ConfigError('augmentation scales must be non-negative and the matching radius positive')
        self.model.validate()
        self.loss_config().validate()


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    params: ParameterStore
    adam: AdamState
    rng_state: dict
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


@dataclass(eq=False)
class Batch:
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    sinusoids: np.ndarray
    covariates: np.ndarray | None
    text: np.ndarray

    @property
    def n(self):
        return self.pixels_a.shape[0]


def assemble_batch(samples, indices, config, epoch, step):
    """Augmented pixels and aligned location/text arrays for one minibatch."""
    size = config.model.image.size
    pixels_a, pixels_b = [], []
    for j, index in enumerate(indices):
        sample = samples[index]
        rng = np.random.default_rng([config.seed, epoch, step, j])
        tile_b = augment_geometric(sample.tile_b, config.crop_size, output_size=size, rng=rng)
        tile_b = augment_photometric(tile_b, config.jitter, config.channel_mix, rng=rng)
        tile_a = augment_photometric(sample.tile_a, config.jitter, config.channel_mix, rng=rng)
        pixels_a.append(tile_a.pixels)
        pixels_b.append(tile_b.pixels)
    chosen = [samples[i] for i in indices]
    use_covariates = config.model.location.use_covariates
    sinusoids, covariates = location_features(
        [s.location.lat for s in chosen], [s.location.lon for s in chosen],
        np.stack([s.covariates for s in chosen]) if use_covariates else None, use_covariates)
    text = np.stack([s.text.embedding for s in chosen])
    if text.shape[1] != config.model.text_dim:
        raise ShapeError(f'text embeddings have {text.shape[1]} dims, model expects {config.model.text_dim}')
    return Batch(np.stack(pixels_a), np.stack(pixels_b), sinusoids, covariates, text)


def build_loss_graph(model, tape, batch, loss_config, training=True):
    """Record the forward pass and the enabled loss terms; returns (total, terms, norm stats)."""
    weights = loss_config.weights()
    features_a, stats = model.image_features(tape, batch.pixels_a, training=training, name='pixels_a')
    pairs = {}
    if weights['image']:
        features_b, stats_b = model.image_features(tape, batch.pixels_b, training=training, name='pixels_b')
        stats = stats + stats_b
        pairs['image'] = (model.project(tape, features_a, 'heads.image'),
                          model.project(tape, features_b, 'heads.image'))
    if weights['text']:
        pairs['text'] = (model.project(tape, features_a, 'heads.txt'),
                         model.project(tape, tape.input('text', batch.text), 'heads.e_txt'))
    if weights['location']:
        location = model.location_embedding(tape, batch.sinusoids, batch.covariates)
        pairs['location'] = (model.project(tape, features_a, 'heads.loc'),
                             model.project(tape, location, 'heads.e_loc'))
    total, terms = wildsat_loss_node(tape, pairs, loss_config)
    tape.output('loss', total)
    return total, terms, stats


def _schedule(config, n_samples, start):
    steps_per_epoch = n_samples // config.batch_size
    epoch, step, global_step = start
    jobs = []
    while epoch < config.epochs:
        if config.max_steps is not None and global_step >= config.max_steps:
            break
        jobs.append((epoch, step, global_step))
        step += 1
        global_step += 1
        if step == steps_per_epoch:
            epoch, step = epoch + 1, 0
    return jobs


def train(config, samples, resume=None):
    """Run the optimizer over `samples`; continue from `resume` when given."""
    config.validate()
    samples = list(samples)
    steps_per_epoch = len(samples) // config.batch_size
    if steps_per_epoch == 0:
        raise ValidationError(f'dataset of {len(samples)} samples is smaller than one batch of {config.batch_size}')

    if resume is None:
        params = init_parameters(config.model, config.seed)
        adam = AdamState(lr=config.lr)
        ckpt = Checkpoint(config, params, adam, {'seed': config.seed, 'epoch': 0, 'step_in_epoch': 0,
                                                 'global_step': 0})
    else:
        if resume.config.model.to_dict() != config.model.to_dict():
            raise CheckpointError('config', 'model configuration differs from the checkpoint')
        if resume.rng_state['seed'] != config.seed:
            raise CheckpointError('rng_state', 'seed differs from the checkpoint')
        ckpt = Checkpoint(config, resume.params.copy(), _copy_adam(resume.adam), dict(resume.rng_state),
                          resume.epoch, list(resume.loss_history), list(resume.step_losses))
        ckpt.adam.lr = config.lr

    model = WildsatModel(config.model, ckpt.params)
    ckpt.params.set_trainable(trainable_mask(config.peft, ckpt.params, config.freeze_location))
    loss_config = config.loss_config()
    state = ckpt.rng_state
    jobs = _schedule(config, len(samples), (state['epoch'], state['step_in_epoch'], state['global_step']))
    logger.info(f"Training {config.peft} for {config.epochs} epochs: {steps_per_epoch} steps per epoch, "
                f"{steps_per_epoch * config.batch_size} of {len(samples)} samples per epoch")

    orders = {}

    def build(job):
        epoch, step, _ = job
        if epoch not in orders:
            orders[epoch] = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        indices = orders[epoch][step * config.batch_size:(step + 1) * config.batch_size]
        return job, assemble_batch(samples, indices, config, epoch, step)

    for (epoch, step, global_step), batch in Prefetcher(jobs, build, depth=config.prefetch):
        tape = Tape()
        total, _, stats = build_loss_graph(model, tape, batch, loss_config, training=True)
        loss = float(total.value)
        if not math.isfinite(loss):
            raise TrainingDivergedError(global_step, loss)
        adam_step(ckpt.params, backward(tape, total), ckpt.adam)
        model.update_running_stats(stats)
        ckpt.step_losses.append(loss)
        logger.debug(f"step {global_step} (epoch {epoch}, step {step}): loss {loss:.6f}")

        step += 1
        if step == steps_per_epoch:
            mean = float(np.mean(ckpt.step_losses[-steps_per_epoch:]))
            ckpt.loss_history.append(mean)
            ckpt.epoch = epoch + 1
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {mean:.6f}")
            epoch, step = epoch + 1, 0
        ckpt.rng_state = {'seed': config.seed, 'epoch': epoch, 'step_in_epoch': step,
                          'global_step': global_step + 1}
    return ckpt


def _copy_adam(adam):
    return AdamState(adam.lr, adam.beta1, adam.beta2, adam.eps, adam.t,
                     {k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()})


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

def blob_path(path):
    return os.path.splitext(path)[0] + '.bin'


def _tensors(ckpt):
    params = ckpt.params
    for name in params.names():
        yield name, params[name]
    for name in params.buffer_names():
        yield f'buffer:{name}', params.buffer(name)
    for name in sorted(ckpt.adam.m):
        yield f'adam.m:{name}', ckpt.adam.m[name]
        yield f'adam.v:{name}', ckpt.adam.v[name]


def save_checkpoint(ckpt, path):
    """Write `path` (JSON header) and its sibling `.bin` blob of little-endian float64 tensors."""
    names, shapes, chunks = [], [], []
    for name, value in _tensors(ckpt):
        names.append(name)
        shapes.append(list(value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=BLOB_DTYPE).tobytes())
    adam = ckpt.adam
    header = {
        'version': CHECKPOINT_VERSION,
        'config': ckpt.config.to_dict(),
        'names': names,
        'shapes': shapes,
        'dtype': 'f64le',
        'rng_state': ckpt.rng_state,
        'epoch': ckpt.epoch,
        'loss_history': ckpt.loss_history,
        'step_losses': ckpt.step_losses,
        'adam': {'lr': adam.lr, 'beta1': adam.beta1, 'beta2': adam.beta2, 'eps': adam.eps, 't': adam.t},
    }
    atomic_write_bytes(blob_path(path), b''.join(chunks))
    atomic_write_text(path, json.dumps(header, indent=2, sort_keys=True) + '\n')
    logger.info(f"Checkpoint saved to {path} ({len(names)} tensors)")


def load_checkpoint(path):
    try:
        with open(path, encoding='utf-8') as handle:
            header = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError('header', f'cannot read {path}: {exc}') from None
    version = header.get('version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError('version', f'unsupported checkpoint version {version!r}')
    if header.get('dtype') != 'f64le':
        raise CheckpointError('dtype', f"unsupported dtype {header.get('dtype')!r}")
    for key in ('config', 'names', 'shapes', 'rng_state', 'epoch', 'adam'):
        if key not in header:
            raise CheckpointError(key, 'missing from checkpoint header')
    names, shapes = header['names'], [tuple(s) for s in header['shapes']]
    if len(names) != len(shapes):
        raise CheckpointError('shapes', 'names and shapes differ in length')
    try:
        with open(blob_path(path), 'rb') as handle:
            blob = handle.read()
    except OSError as exc:
        raise CheckpointError('blob', f'cannot read {blob_path(path)}: {exc}') from None
    expected = sum(int(np.prod(shape)) for shape in shapes) * 8
    if len(blob) != expected:
        raise CheckpointError('blob', f'blob length mismatch: expected {expected} bytes, found {len(blob)}')

    config = TrainConfig.from_dict(header['config'], base=TrainConfig())
    reference = init_parameters(config.model, config.seed)
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE)
    params = ParameterStore()
    adam_info = header['adam']
    adam = AdamState(lr=adam_info['lr'], beta1=adam_info['beta1'], beta2=adam_info['beta2'],
                     eps=adam_info['eps'], t=adam_info['t'])
    offset = 0
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape))
        value = flat[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
        kind, _, key = name.rpartition(':')
        if kind == '':
            _expect_shape(name, shape, reference[name] if name in reference else None)
            params.add(name, value)
        elif kind == 'buffer':
            _expect_shape(name, shape, reference.buffer(key) if key in reference.buffer_names() else None)
            params.add_buffer(key, value)
        elif kind in ('adam.m', 'adam.v'):
            _expect_shape(name, shape, reference[key] if key in reference else None)
            (adam.m if kind == 'adam.m' else adam.v)[key] = value
        else:
            raise CheckpointError(name, 'unknown tensor kind')
    missing = (set(reference.names()) - set(params.names())) | (set(reference.buffer_names()) - set(params.buffer_names()))
    if missing:
        raise CheckpointError(sorted(missing)[0], 'missing from checkpoint')
    params.set_trainable(trainable_mask(config.peft, params, config.freeze_location))
    return Checkpoint(config, params, adam, dict(header['rng_state']), int(header['epoch']),
                      list(header.get('loss_history', [])), list(header.get('step_losses', [])))


def _expect_shape(name, shape, reference):
    if reference is None:
        raise CheckpointError(name, 'not part of the configured model')
    if tuple(shape) != reference.shape:
        raise CheckpointError(name, f'shape mismatch: {tuple(shape)} vs configured {reference.shape}')


def load_model(path):
    """Checkpoint → WildsatModel ready for evaluation."""
    ckpt = load_checkpoint(path)
    return WildsatModel(ckpt.config.model, ckpt.params), ckpt
