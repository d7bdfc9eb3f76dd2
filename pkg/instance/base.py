from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from exceptions import DataError, ValidationError

COVARIATE_CHANNELS = 20


@dataclass(frozen=True)
class GeoObservation:
    lat: float
    lon: float
    species_id: int

    def validate(self, source='observations', index=None, species_count=None):
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(source, 'lat out of range', index)
        if not -180.0 <= self.lon < 180.0:
            raise DataError(source, 'lon out of range', index)
        if self.species_id < 0 or (species_count is not None and self.species_id >= species_count):
            raise DataError(source, f'species_id {self.species_id} out of range', index)


@dataclass(eq=False)
class CovariateRaster:
    """Regular lat/lon grid of node values; node (r, c) sits at (lat0 + r·dlat, lon0 + c·dlon)."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    values: np.ndarray
    channel_min: np.ndarray = None
    channel_max: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValidationError(f'raster values must be rows×cols×channels, got {self.values.shape}')
        if not (self.dlat > 0 and self.dlon > 0):
            raise ValidationError('raster cell size must be positive')
        if not np.all(np.isfinite(self.values)):
            raise ValidationError('raster values must be finite')
        if self.channel_min is None:
            self.channel_min = self.values.min(axis=(0, 1))
        if self.channel_max is None:
            self.channel_max = self.values.max(axis=(0, 1))
        self.channel_min = np.asarray(self.channel_min, dtype=np.float64)
        self.channel_max = np.asarray(self.channel_max, dtype=np.float64)
        if np.any(self.channel_min > self.channel_max):
            raise ValidationError('raster channel_min exceeds channel_max')

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def lat_max(self):
        return self.lat0 + (self.rows - 1) * self.dlat

    @property
    def lon_max(self):
        return self.lon0 + (self.cols - 1) * self.dlon

    def contains(self, lat, lon):
        return self.lat0 <= lat <= self.lat_max and self.lon0 <= lon <= self.lon_max


@dataclass(eq=False)
class TileRecord:
    tile_id: int
    lat: float
    lon: float
    timestamp: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels):
        return replace(self, pixels=pixels)

    def validate(self, source='tiles', index=None):
        if self.pixels.ndim != 3:
            raise DataError(source, f'tile pixels must be C×H×W, got {self.pixels.shape}', index)
        if not np.all((self.pixels >= 0.0) & (self.pixels <= 1.0)):
            raise DataError(source, 'tile pixels outside [0, 1]', index)


@dataclass(eq=False)
class TextSection:
    species_id: int
    section_id: int
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)


@dataclass(eq=False)
class TrainingSample:
    """One aligned record; `covariates` are already normalized to [-1, 1]."""

    tile_a: TileRecord
    tile_b: TileRecord
    location: GeoObservation
    covariates: np.ndarray
    text: TextSection


@dataclass(eq=False)
class Dataset:
    observations: list
    raster: CovariateRaster
    tiles: list
    texts: list
    labels: dict = field(default_factory=dict)
    text_prototypes: np.ndarray | None = None

    @property
    def text_dim(self):
        return int(self.texts[0].embedding.shape[0]) if self.texts else 0

    @property
    def species_count(self):
        ids = [o.species_id for o in self.observations] + [t.species_id for t in self.texts]
        return max(ids) + 1 if ids else 0
