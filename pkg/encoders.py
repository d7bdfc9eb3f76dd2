"""
Encoders
========

The satellite-image encoder, the SINR-style location encoder, the five
bias-free projection heads and PEFT parameter masks. Every forward pass is
recorded on a `numerics.Tape`; the numpy helpers at the bottom of
`WildsatModel` run the same graphs in evaluation mode.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from exceptions import ConfigError, ShapeError, ValidationError
from instance.base import COVARIATE_CHANNELS
from numerics import RUNNING_MOMENTUM, ParameterStore, Tape

SINUSOID_FEATURES = 4
HEAD_NAMES = ('heads.image', 'heads.txt', 'heads.loc', 'heads.e_txt', 'heads.e_loc')


@dataclass
class ImageEncoderConfig:
    channels: int = 3
    size: int = 32
    widths: tuple = (16, 32)
    kernel_size: int = 3
    feature_dim: int = 128
    norm: str = 'scale_shift'

    def validate(self):
        if self.feature_dim < 8:
            raise ConfigError(f'image feature_dim must be at least 8, got {self.feature_dim}')
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError('image widths must be positive')
        if self.channels < 1 or self.size < 1 or self.kernel_size < 1:
            raise ConfigError('image dims must be positive')
        if self.norm != 'scale_shift':
            raise ConfigError(f'unsupported norm kind {self.norm!r}')


@dataclass
class LocationEncoderConfig:
    kind: str = 'sinr'
    use_covariates: bool = True
    hidden: int = 64
    depth: int = 3
    output_dim: int = 64

    @property
    def input_dim(self):
        return SINUSOID_FEATURES + (COVARIATE_CHANNELS if self.use_covariates else 0)

    @property
    def embedding_dim(self):
        return self.output_dim if self.kind == 'sinr' else self.input_dim

    def validate(self):
        if self.kind not in ('sinr', 'positional'):
            raise ConfigError(f'unknown location encoder kind {self.kind!r}')
        if self.kind == 'sinr':
            if self.output_dim < 8:
                raise ConfigError(f'location output_dim must be at least 8, got {self.output_dim}')
            if self.depth < 1 or self.hidden < 1:
                raise ConfigError('location depth and hidden width must be positive')


@dataclass
class ModelConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    location: LocationEncoderConfig = field(default_factory=LocationEncoderConfig)
    embed_dim: int = 64
    text_dim: int = 64

    def validate(self):
        self.image.validate()
        self.location.validate()
        if self.embed_dim < 1 or self.text_dim < 1:
            raise ConfigError('embedding dims must be positive')

    def to_dict(self):
        payload = asdict(self)
        payload['image']['widths'] = list(self.image.widths)
        return payload

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        try:
            image = dict(payload.pop('image', {}))
            if 'widths' in image:
                image['widths'] = tuple(image['widths'])
            return cls(image=ImageEncoderConfig(**image),
                       location=LocationEncoderConfig(**payload.pop('location', {})), **payload)
        except TypeError as exc:
            raise ConfigError(f'invalid model config: {exc}') from None


class PeftMode(str, Enum):
    FULL = 'full'
    SCALE_SHIFT = 'scale_shift'


def trainable_mask(mode, params, freeze_location=False):
    """Names of the parameters an optimizer may touch under `mode`."""
    try:
        mode = PeftMode(mode)
    except ValueError:
        raise ConfigError(f'unknown PEFT mode {mode!r}') from None
    names = set()
    for name in params.names():
        if name.startswith('location.'):
            if not freeze_location:
                names.add(name)
        elif name.startswith('heads.'):
            names.add(name)
        elif mode is PeftMode.FULL:
            names.add(name)
        elif name.startswith('image.norm') and name.endswith(('.gamma', '.beta')):
            names.add(name)
    return names


def location_features(lat, lon, covariates=None, use_covariates=True):
    """Sinusoidal wrap of (lat, lon), optionally followed by normalized covariates."""
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValidationError('coordinates must be finite')
    # longitude wraps; latitude does not
    if np.any(np.abs(lat) > 90.0):
        raise ValidationError(f'lat out of range [-90, 90]: {lat[np.abs(lat) > 90.0][0]}')
    if covariates is not None and not use_covariates:
        raise ValidationError('covariates supplied but the location encoder does not use them')
    if covariates is None and use_covariates:
        raise ValidationError('the location encoder expects covariates')
    sinusoids = np.stack([
        np.sin(np.pi * lon / 180.0), np.cos(np.pi * lon / 180.0),
        np.sin(np.pi * lat / 90.0), np.cos(np.pi * lat / 90.0),
    ], axis=1)
    if covariates is None:
        return sinusoids, None
    covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    if covariates.shape != (sinusoids.shape[0], COVARIATE_CHANNELS):
        raise ShapeError(f'covariates must be {COVARIATE_CHANNELS} per location, got {covariates.shape}')
    if np.any(np.abs(covariates) > 1.0):
        raise ValidationError('covariates must be normalized to [-1, 1]')
    return sinusoids, covariates


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(config, seed=0):
    """Fan-in scaled uniform weights, zero biases, γ=1, β=0, unit running variance."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    image = config.image
    k = image.kernel_size
    in_channels = image.channels
    for i, width in enumerate(image.widths, start=1):
        store.add(f'image.conv{i}.weight', _uniform(rng, (width, in_channels, k, k), in_channels * k * k))
        store.add(f'image.norm{i}.gamma', np.ones(width))
        store.add(f'image.norm{i}.beta', np.zeros(width))
        store.add_buffer(f'image.norm{i}.running_mean', np.zeros(width))
        store.add_buffer(f'image.norm{i}.running_var', np.ones(width))
        in_channels = width
    store.add('image.fc.weight', _uniform(rng, (in_channels, image.feature_dim), in_channels))
    store.add('image.fc.bias', np.zeros(image.feature_dim))

    location = config.location
    if location.kind == 'sinr':
        store.add('location.input.weight', _uniform(rng, (location.input_dim, location.hidden), location.input_dim))
        store.add('location.input.bias', np.zeros(location.hidden))
        for j in range(1, location.depth):
            store.add(f'location.block{j}.weight', _uniform(rng, (location.hidden, location.hidden), location.hidden))
            store.add(f'location.block{j}.bias', np.zeros(location.hidden))
        store.add('location.output.weight',
                  _uniform(rng, (location.hidden, location.output_dim), location.hidden))
        store.add('location.output.bias', np.zeros(location.output_dim))

    d = config.embed_dim
    for head in ('heads.image', 'heads.txt', 'heads.loc'):
        store.add(head, _uniform(rng, (image.feature_dim, d), image.feature_dim))
    store.add('heads.e_txt', _uniform(rng, (config.text_dim, d), config.text_dim))
    store.add('heads.e_loc', _uniform(rng, (location.embedding_dim, d), location.embedding_dim))
    return store


class WildsatModel:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)

    # graph builders

    def _check_pixels(self, pixels):
        image = self.config.image
        expected = (image.channels, image.size, image.size)
        if pixels.ndim != 4 or pixels.shape[1:] != expected:
            raise ShapeError(f'tile pixels must be N×{expected}, got {pixels.shape}')

    def image_features(self, tape, pixels, training=False, name='pixels'):
        """f_θ: (conv stride 2 → scale-shift norm → relu) per stage, pool, linear.

        Returns the feature node and, in training mode, the batch statistics
        needed to update the running averages.
        """
        pixels = np.asarray(pixels, dtype=np.float64)
        self._check_pixels(pixels)
        p = self.params
        k = self.config.image.kernel_size
        x = tape.input(name, pixels)
        stats = []
        for i in range(1, len(self.config.image.widths) + 1):
            x = tape.conv2d(x, tape.param(p, f'image.conv{i}.weight'), stride=2, padding=k // 2)
            gamma = tape.param(p, f'image.norm{i}.gamma')
            beta = tape.param(p, f'image.norm{i}.beta')
            if training:
                pre = x.value
                count = pre.size // pre.shape[1]
                var = pre.var(axis=(0, 2, 3))
                stats.append((f'image.norm{i}', pre.mean(axis=(0, 2, 3)),
                              var * count / (count - 1) if count > 1 else var))
                x = tape.scale_shift_norm(x, gamma, beta)
            else:
                x = tape.scale_shift_norm(x, gamma, beta,
                                          running_mean=p.buffer(f'image.norm{i}.running_mean'),
                                          running_var=p.buffer(f'image.norm{i}.running_var'))
            x = tape.relu(x)
        x = tape.global_avg_pool(x)
        features = tape.add_bias(x @ tape.param(p, 'image.fc.weight'), tape.param(p, 'image.fc.bias'))
        return features, stats

    def location_embedding(self, tape, sinusoids, covariates=None, name='location'):
        location = self.config.location
        p = self.params
        x = tape.input(name, sinusoids)
        if covariates is not None:
            x = tape.concat([x, tape.input(f'{name}.covariates', covariates)], axis=1)
        if location.kind == 'positional':
            return x
        h = tape.relu(tape.add_bias(x @ tape.param(p, 'location.input.weight'), tape.param(p, 'location.input.bias')))
        for j in range(1, location.depth):
            block = tape.relu(tape.add_bias(h @ tape.param(p, f'location.block{j}.weight'),
                                            tape.param(p, f'location.block{j}.bias')))
            h = h + block
        return tape.add_bias(h @ tape.param(p, 'location.output.weight'), tape.param(p, 'location.output.bias'))

    def project(self, tape, x, head):
        return tape.l2_normalize_rows(x @ tape.param(self.params, head))

    def update_running_stats(self, stats, momentum=RUNNING_MOMENTUM):
        for prefix, mean, var in stats:
            for suffix, batch_value in (('running_mean', mean), ('running_var', var)):
                name = f'{prefix}.{suffix}'
                old = self.params.buffer(name)
                self.params.set_buffer(name, (1.0 - momentum) * old + momentum * batch_value)

    # evaluation-mode helpers

    def encode_image(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        single = pixels.ndim == 3
        tape = Tape()
        features, _ = self.image_features(tape, pixels[None] if single else pixels, training=False)
        return features.value[0] if single else features.value

    def encode_location(self, lat, lon, covariates=None):
        """Location embedding for coordinates with lat in [-90, 90] and lon in [-180, 180)."""
        lon_values = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        outside = (lon_values < -180.0) | (lon_values >= 180.0)
        if np.any(outside):
            raise ValidationError(f'lon out of range [-180, 180): {lon_values[outside][0]}')
        single = np.ndim(lat) == 0
        sinusoids, covariates = location_features(lat, lon, covariates, self.config.location.use_covariates)
        tape = Tape()
        embedding = self.location_embedding(tape, sinusoids, covariates).value
        return embedding[0] if single else embedding

    def project_values(self, x, heads):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        tape = Tape()
        node = tape.input('x', x[None] if single else x)
        out = tuple(self.project(tape, node, head).value for head in heads)
        return tuple(o[0] for o in out) if single else out

    def project_image_heads(self, feature):
        """(z_I, z_txt, z_loc) for one feature vector or a batch of them."""
        return self.project_values(feature, ('heads.image', 'heads.txt', 'heads.loc'))

    def project_text(self, raw):
        return self.project_values(raw, ('heads.e_txt',))[0]

    def project_location(self, location_embedding):
        return self.project_values(location_embedding, ('heads.e_loc',))[0]
