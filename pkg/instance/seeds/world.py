"""
Synthetic world
===============

Generates a small dataset with known ground truth: the raster is split into
habitat regions, each habitat owns a tile texture, a covariate profile and a
text prototype, and every species lives in exactly one habitat.

Tile brightness is drawn per tile from one distribution shared by every
habitat, so mean colour says nothing about the habitat. The habitat shows
only in its stripe texture, seen at a random offset per site.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from exceptions import ConfigError
from extensions import get_logger
from instance.base import (
    COVARIATE_CHANNELS,
    CovariateRaster,
    Dataset,
    GeoObservation,
    TextSection,
    TileRecord,
)

logger = get_logger('synthetic_world')

BASE_TIMESTAMP = 1_600_000_000
TIMESTAMP_STEP = 30 * 24 * 3600
BRIGHTNESS = 0.65
BASE_FREQUENCIES = (2, 1, 3)


@dataclass
class SyntheticWorldConfig:
    seed: int = 0
    species: int = 32
    habitats: int = 8
    raster_rows: int = 9
    raster_cols: int = 9
    lat0: float = 40.0
    lon0: float = -10.0
    cell_size: float = 0.5
    tiles_per_habitat: int = 32
    timestamps_per_site: int = 2
    observations: int = 1024
    sections_per_species: int = 3
    text_dim: int = 64
    tile_channels: int = 3
    tile_size: int = 32
    texture_amplitude: float = 0.08
    brightness_spread: float = 0.15
    pixel_noise: float = 0.02
    covariate_noise: float = 0.05
    text_noise: float = 0.3
    observation_jitter: float = 0.03

    @classmethod
    def from_dict(cls, payload):
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f'unknown synthetic world keys: {sorted(unknown)}')
        return cls(**payload)

    def to_dict(self):
        return asdict(self)

    @property
    def cells(self):
        return (self.raster_rows - 1) * (self.raster_cols - 1)

    def validate(self):
        counts = {
            'species': self.species, 'habitats': self.habitats, 'tiles_per_habitat': self.tiles_per_habitat,
            'timestamps_per_site': self.timestamps_per_site, 'observations': self.observations,
            'sections_per_species': self.sections_per_species, 'text_dim': self.text_dim,
            'tile_channels': self.tile_channels, 'tile_size': self.tile_size,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f'{name} must be at least 1, got {value}')
        for name in ('brightness_spread', 'pixel_noise', 'covariate_noise', 'text_noise', 'observation_jitter'):
            if getattr(self, name) < 0:
                raise ConfigError(f'{name} must be non-negative')
        if self.texture_amplitude <= 0:
            raise ConfigError('texture_amplitude must be positive')
        if self.raster_rows < 2 or self.raster_cols < 2:
            raise ConfigError('raster needs at least 2×2 nodes')
        if self.habitats > self.cells:
            raise ConfigError(f'infeasible: {self.habitats} habitats for {self.cells} raster cells')
        patterns = len(pattern_catalogue(self.tile_size))
        if self.habitats > patterns:
            raise ConfigError(f'infeasible: {self.habitats} habitats but {self.tile_size}px tiles '
                              f'carry only {patterns} distinct textures')
        if self.tiles_per_habitat % self.timestamps_per_site:
            raise ConfigError('tiles_per_habitat must be a multiple of timestamps_per_site')
        if self.cell_size <= 0:
            raise ConfigError('cell_size must be positive')
        if self.observation_jitter >= self.cell_size / 4:
            raise ConfigError('observation_jitter must stay below a quarter cell')
        lat_max = self.lat0 + (self.raster_rows - 1) * self.cell_size
        lon_max = self.lon0 + (self.raster_cols - 1) * self.cell_size
        if self.lat0 < -90 or lat_max > 90 or self.lon0 < -180 or lon_max >= 180:
            raise ConfigError('raster extent leaves the valid lat/lon range')
        reach = self.brightness_spread + math.sqrt(2.0) * self.texture_amplitude
        if BRIGHTNESS + reach > 1.0 or BRIGHTNESS - reach < 0.0:
            raise ConfigError('brightness_spread and texture_amplitude push tiles outside [0, 1]')
        separation = prototype_separation(self)
        if self.pixel_noise > 0.25 * separation:
            raise ConfigError(f'pixel_noise {self.pixel_noise} exceeds a quarter of the prototype '
                              f'separation {separation:.4f}')


@dataclass(eq=False)
class SyntheticWorld:
    config: SyntheticWorldConfig
    raster: CovariateRaster
    tiles: list
    observations: list
    texts: list
    tile_labels: dict
    species_habitat: np.ndarray
    habitat_map: np.ndarray
    habitat_patterns: list
    habitat_prototypes: np.ndarray
    text_prototypes: np.ndarray

    def habitat_of(self, lat, lon):
        size = self.config.cell_size
        r = min(int((lat - self.config.lat0) // size), self.habitat_map.shape[0] - 1)
        c = min(int((lon - self.config.lon0) // size), self.habitat_map.shape[1] - 1)
        return int(self.habitat_map[r, c])

    def species_of_habitat(self, habitat):
        return [int(s) for s in np.flatnonzero(self.species_habitat == habitat)]

    def to_dataset(self):
        labels = {tile_id: {'habitat': habitat, 'species': self.species_of_habitat(habitat)}
                  for tile_id, habitat in self.tile_labels.items()}
        return Dataset(list(self.observations), self.raster, list(self.tiles), list(self.texts),
                       labels, self.text_prototypes.copy())


def pattern_catalogue(tile_size):
    """Stripe textures as tuples of (fy, fx) frequencies in cycles per tile.

    Every entry maps to itself under horizontal and vertical flips, and no
    two entries share a frequency, so any two are orthogonal on the pixel grid.
    """
    scale = max(1, tile_size // 16)
    catalogue = []
    for base in BASE_FREQUENCIES:
        f = base * scale
        catalogue += [((f, 0),), ((0, f),), ((f, f), (f, -f))]
    return [pattern for pattern in catalogue
            if max(abs(v) for frequency in pattern for v in frequency) < tile_size / 2]


def prototype_separation(cfg):
    """RMS distance between any two habitat textures, whatever their offsets."""
    # disjoint frequencies: each texture contributes variance amplitude²/2
    return cfg.texture_amplitude


def texture(pattern, size, amplitude):
    """Zero-mean sum of cosines with variance amplitude²/2."""
    grid = np.arange(size)
    yy, xx = np.meshgrid(grid, grid, indexing='ij')
    waves = [np.cos(2 * np.pi * (fy * yy + fx * xx) / size) for fy, fx in pattern]
    return amplitude / np.sqrt(len(waves)) * np.sum(waves, axis=0)


def aligned_distance(pixels, prototype):
    """RMS distance after removing both means and applying the best cyclic shift of `prototype`."""
    a = np.asarray(pixels, dtype=np.float64)
    b = np.asarray(prototype, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    correlation = np.real(np.fft.ifft2(np.fft.fft2(a) * np.conj(np.fft.fft2(b)))).sum(axis=0)
    squared = (a ** 2).sum() + (b ** 2).sum() - 2.0 * correlation.max()
    return float(np.sqrt(max(squared, 0.0) / a.size))


def _float32(values):
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def _habitat_map(cfg, rng):
    n_rows, n_cols = cfg.raster_rows - 1, cfg.raster_cols - 1
    seeds = rng.choice(n_rows * n_cols, cfg.habitats, replace=False)
    seed_rc = np.stack([seeds // n_cols, seeds % n_cols], axis=1)
    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing='ij')
    cells = np.stack([rr.ravel(), cc.ravel()], axis=1)
    distance = ((cells[:, None, :] - seed_rc[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(distance, axis=1).reshape(n_rows, n_cols)


def _tile_prototypes(cfg, rng):
    catalogue = pattern_catalogue(cfg.tile_size)
    patterns = [catalogue[i] for i in rng.permutation(len(catalogue))[:cfg.habitats]]
    textures = np.stack([texture(p, cfg.tile_size, cfg.texture_amplitude) for p in patterns])
    prototypes = BRIGHTNESS + np.repeat(textures[:, None], cfg.tile_channels, axis=1)
    return patterns, prototypes


def generate_synthetic_world(cfg):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    habitat_map = _habitat_map(cfg, rng)
    patterns, prototypes = _tile_prototypes(cfg, rng)

    covariate_prototypes = rng.uniform(-1.0, 1.0, size=(cfg.habitats, COVARIATE_CHANNELS))
    node_rows = np.minimum(np.arange(cfg.raster_rows), cfg.raster_rows - 2)
    node_cols = np.minimum(np.arange(cfg.raster_cols), cfg.raster_cols - 2)
    node_habitat = habitat_map[np.ix_(node_rows, node_cols)]
    values = covariate_prototypes[node_habitat]
    values = values + cfg.covariate_noise * rng.standard_normal(values.shape)
    raster = CovariateRaster(cfg.lat0, cfg.lon0, cfg.cell_size, cfg.cell_size, _float32(values))

    text_prototypes = rng.standard_normal((cfg.habitats, cfg.text_dim))
    text_prototypes /= np.linalg.norm(text_prototypes, axis=1, keepdims=True)
    species_habitat = np.arange(cfg.species) % cfg.habitats
    scale = 1.0 / np.sqrt(cfg.text_dim)
    texts = []
    for species in range(cfg.species):
        centre = text_prototypes[species_habitat[species]] + 0.3 * scale * rng.standard_normal(cfg.text_dim)
        for section in range(cfg.sections_per_species):
            embedding = centre + cfg.text_noise * scale * rng.standard_normal(cfg.text_dim)
            texts.append(TextSection(species, section, _float32(embedding)))

    tiles = []
    tile_labels = {}
    sites = {h: [] for h in range(cfg.habitats)}
    for habitat in range(cfg.habitats):
        cells = np.argwhere(habitat_map == habitat)
        for _ in range(cfg.tiles_per_habitat // cfg.timestamps_per_site):
            r, c = cells[rng.integers(len(cells))]
            lat = cfg.lat0 + (r + 0.5 + rng.uniform(-0.25, 0.25)) * cfg.cell_size
            lon = cfg.lon0 + (c + 0.5 + rng.uniform(-0.25, 0.25)) * cfg.cell_size
            sites[habitat].append((float(lat), float(lon)))
            shift = tuple(int(s) for s in rng.integers(0, cfg.tile_size, size=2))
            seen = np.roll(prototypes[habitat] - BRIGHTNESS, shift, axis=(1, 2))
            for step in range(cfg.timestamps_per_site):
                brightness = BRIGHTNESS + rng.uniform(-cfg.brightness_spread, cfg.brightness_spread)
                noise = cfg.pixel_noise * rng.standard_normal(seen.shape)
                pixels = _float32(np.clip(brightness + seen + noise, 0.0, 1.0))
                tile = TileRecord(len(tiles), float(lat), float(lon), BASE_TIMESTAMP + step * TIMESTAMP_STEP, pixels)
                tile_labels[tile.tile_id] = habitat
                tiles.append(tile)

    observations = []
    for _ in range(cfg.observations):
        species = int(rng.integers(cfg.species))
        habitat_sites = sites[int(species_habitat[species])]
        lat, lon = habitat_sites[rng.integers(len(habitat_sites))]
        lat += rng.uniform(-cfg.observation_jitter, cfg.observation_jitter)
        lon += rng.uniform(-cfg.observation_jitter, cfg.observation_jitter)
        observations.append(GeoObservation(float(lat), float(lon), species))

    logger.info(f"Generated synthetic world seed={cfg.seed}: {cfg.habitats} habitats, {cfg.species} species, "
                f"{len(tiles)} tiles, {len(observations)} observations")
    return SyntheticWorld(cfg, raster, tiles, observations, texts, tile_labels, species_habitat,
                          habitat_map, patterns, prototypes, _float32(text_prototypes))
