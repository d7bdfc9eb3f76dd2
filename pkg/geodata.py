"""
Geodata
=======

Covariate sampling, observation/tile/text pairing, tile augmentations and
the on-disk dataset format (observations.csv, raster.json/.bin,
tiles/manifest.json, text/sections.json/embeddings.bin).
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage

from exceptions import DataError, ValidationError
from extensions import get_logger
from instance.base import (
    CovariateRaster,
    Dataset,
    GeoObservation,
    TextSection,
    TileRecord,
    TrainingSample,
)

logger = get_logger('geodata')

DEFAULT_MATCHING_RADIUS = 0.05
NODE_SNAP = 1e-9
OBSERVATION_COLUMNS = ['lat', 'lon', 'species_id']


def _as_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------

def _grid_coord(offset, n):
    nearest = round(offset)
    if abs(offset - nearest) < NODE_SNAP:
        offset = float(nearest)
    return min(max(offset, 0.0), float(n - 1))


def bilinear_sample(raster, lat, lon):
    """Blend the four grid nodes around (lat, lon), channel by channel."""
    if not raster.contains(lat, lon):
        raise ValidationError(
            f'query ({lat}, {lon}) outside raster bounds '
            f'lat [{raster.lat0}, {raster.lat_max}], lon [{raster.lon0}, {raster.lon_max}]'
        )
    fr = _grid_coord((lat - raster.lat0) / raster.dlat, raster.rows)
    fc = _grid_coord((lon - raster.lon0) / raster.dlon, raster.cols)
    r0 = min(int(math.floor(fr)), max(raster.rows - 2, 0))
    c0 = min(int(math.floor(fc)), max(raster.cols - 2, 0))
    r1 = min(r0 + 1, raster.rows - 1)
    c1 = min(c0 + 1, raster.cols - 1)
    t = fr - r0
    u = fc - c0
    v = raster.values
    return (((1.0 - t) * (1.0 - u)) * v[r0, c0] + ((1.0 - t) * u) * v[r0, c1]
            + (t * (1.0 - u)) * v[r1, c0] + (t * u) * v[r1, c1])


def normalize_covariates(raster, values):
    """Min-max scale covariates to [-1, 1] with raster-wide channel statistics."""
    values = np.asarray(values, dtype=np.float64)
    span = raster.channel_max - raster.channel_min
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, 2.0 * (values - raster.channel_min) / safe - 1.0, 0.0)
    return np.clip(scaled, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------

class TileIndex:
    """Tile centers for nearest-center lookup; tiles at one center form a site."""

    def __init__(self, tiles):
        self.tiles = sorted(tiles, key=lambda t: t.tile_id)
        self.lats = np.array([t.lat for t in self.tiles], dtype=np.float64)
        self.lons = np.array([t.lon for t in self.tiles], dtype=np.float64)
        self.sites = defaultdict(list)
        for tile in self.tiles:
            self.sites[(tile.lat, tile.lon)].append(tile)

    def nearest(self, lat, lon, radius):
        if not self.tiles:
            return None
        distance = np.hypot(self.lats - lat, self.lons - lon)
        within = np.flatnonzero(distance <= radius)
        if within.size == 0:
            return None
        # tiles are sorted by id, so the first minimum is the lowest id
        return self.tiles[int(within[np.argmin(distance[within])])]

    def site_of(self, tile):
        return self.sites[(tile.lat, tile.lon)]


@dataclass
class PairingResult:
    samples: list
    skipped: Counter = field(default_factory=Counter)

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)


def pair_samples(observations, tiles, texts, raster, matching_radius=DEFAULT_MATCHING_RADIUS,
                 seed=0, workers=1):
    """Pair each observation with tiles, covariates and one random text section.

    Each observation draws from its own RNG seeded by (seed, index), so
    sharding over `workers` threads yields the serial order.
    """
    if not observations:
        raise ValidationError('no observations to pair')
    index = TileIndex(tiles)
    sections = defaultdict(list)
    for section in texts:
        sections[section.species_id].append(section)

    def pair_one(i):
        observation = observations[i]
        tile_a = index.nearest(observation.lat, observation.lon, matching_radius)
        if tile_a is None:
            return None, 'no_tile'
        candidates = sections.get(observation.species_id)
        if not candidates:
            return None, 'no_text'
        if not raster.contains(observation.lat, observation.lon):
            return None, 'outside_raster'
        rng = np.random.default_rng([seed, i])
        others = [t for t in index.site_of(tile_a) if t.timestamp != tile_a.timestamp]
        tile_b = others[int(rng.integers(len(others)))] if others else tile_a
        text = candidates[int(rng.integers(len(candidates)))]
        covariates = normalize_covariates(raster, bilinear_sample(raster, observation.lat, observation.lon))
        return TrainingSample(tile_a, tile_b, observation, covariates, text), None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(pair_one, range(len(observations))))
    else:
        results = [pair_one(i) for i in range(len(observations))]

    samples = [sample for sample, _ in results if sample is not None]
    skipped = Counter(reason for _, reason in results if reason is not None)
    if not samples:
        raise ValidationError(f'all {len(observations)} observations skipped: {dict(skipped)}')
    if skipped:
        logger.warning(f"Skipped {sum(skipped.values())} observations: {dict(skipped)}")
    logger.info(f"Paired {len(samples)} training samples from {len(observations)} observations")
    return PairingResult(samples, skipped)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def flip_horizontal(pixels):
    return pixels[:, :, ::-1].copy()


def flip_vertical(pixels):
    return pixels[:, ::-1, :].copy()


def resize_bilinear(pixels, height, width):
    """Corner-aligned bilinear resize of a C×H×W array."""
    _, h, w = pixels.shape
    if (h, w) == (height, width):
        return pixels.copy()
    out = ndimage.zoom(pixels, (1.0, height / h, width / w), order=1, mode='nearest', grid_mode=False)
    return np.clip(out, 0.0, 1.0)


def augment_geometric(tile, crop_size, output_size=None, rng=0):
    """Random flips (p=0.5 each), a uniform random crop, then a resize to `output_size`."""
    rng = _as_rng(rng)
    _, height, width = tile.pixels.shape
    if crop_size < 1 or crop_size > min(height, width):
        raise ValidationError(f'crop size {crop_size} does not fit a {height}×{width} tile')
    out_h, out_w = (height, width) if output_size is None else (output_size, output_size)
    pixels = tile.pixels
    if rng.random() < 0.5:
        pixels = flip_horizontal(pixels)
    if rng.random() < 0.5:
        pixels = flip_vertical(pixels)
    top = int(rng.integers(0, height - crop_size + 1))
    left = int(rng.integers(0, width - crop_size + 1))
    pixels = pixels[:, top:top + crop_size, left:left + crop_size]
    return tile.with_pixels(resize_bilinear(pixels, out_h, out_w))


def augment_photometric(tile, jitter, mix, rng=0, mixing=None):
    """Channel mixing by rows of I + mix·R (renormalized to sum 1), additive jitter, clamp."""
    if jitter < 0 or mix < 0:
        raise ValidationError('jitter and mix strength must be non-negative')
    rng = _as_rng(rng)
    channels = tile.pixels.shape[0]
    offsets = rng.uniform(-jitter, jitter, size=channels)
    random_mix = rng.uniform(-1.0, 1.0, size=(channels, channels))
    matrix = np.eye(channels) + mix * random_mix if mixing is None else np.asarray(mixing, dtype=np.float64)
    sums = matrix.sum(axis=1, keepdims=True)
    # rows that nearly cancel fall back to the identity row
    degenerate = np.abs(sums[:, 0]) < 1e-6
    matrix = np.where(degenerate[:, None], np.eye(channels), matrix)
    sums = np.where(degenerate[:, None], 1.0, sums)
    mixed = np.tensordot(matrix / sums, tile.pixels, axes=([1], [0])) + offsets[:, None, None]
    return tile.with_pixels(np.clip(mixed, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _float32_bytes(array):
    return np.ascontiguousarray(array, dtype='<f4').tobytes()


def _read_float32(path, source):
    try:
        with open(path, 'rb') as handle:
            blob = handle.read()
    except OSError as exc:
        raise DataError(source, f'cannot read file: {exc}') from None
    if len(blob) % 4:
        raise DataError(source, f'length {len(blob)} is not a whole number of float32 values')
    return np.frombuffer(blob, dtype='<f4').astype(np.float64)


def _load_json(path, source):
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(source, f'malformed JSON: {exc}') from None


def _dump_json(path, payload):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def _require_keys(record, keys, source, index=None):
    missing = [k for k in keys if k not in record]
    if missing:
        raise DataError(source, f'malformed header, missing {missing}', index)


def write_dataset(dataset, directory):
    """Write every dataset file under `directory` (created if needed)."""
    os.makedirs(os.path.join(directory, 'tiles'), exist_ok=True)
    os.makedirs(os.path.join(directory, 'text'), exist_ok=True)

    frame = pd.DataFrame({
        'lat': [o.lat for o in dataset.observations],
        'lon': [o.lon for o in dataset.observations],
        'species_id': [o.species_id for o in dataset.observations],
    }, columns=OBSERVATION_COLUMNS)
    frame.to_csv(os.path.join(directory, 'observations.csv'), index=False, lineterminator='\n')

    raster = dataset.raster
    _dump_json(os.path.join(directory, 'raster.json'), {
        'rows': raster.rows, 'cols': raster.cols, 'channels': raster.channels,
        'lat0': raster.lat0, 'lon0': raster.lon0, 'dlat': raster.dlat, 'dlon': raster.dlon,
        'channel_min': [float(v) for v in raster.channel_min],
        'channel_max': [float(v) for v in raster.channel_max],
    })
    with open(os.path.join(directory, 'raster.bin'), 'wb') as handle:
        handle.write(_float32_bytes(raster.values))

    manifest = []
    for tile in dataset.tiles:
        filename = f'tile_{tile.tile_id:06d}.bin'
        c, h, w = tile.pixels.shape
        manifest.append({'tile_id': tile.tile_id, 'lat': tile.lat, 'lon': tile.lon,
                         'timestamp': tile.timestamp, 'file': filename, 'c': c, 'h': h, 'w': w})
        with open(os.path.join(directory, 'tiles', filename), 'wb') as handle:
            handle.write(_float32_bytes(tile.pixels))
    _dump_json(os.path.join(directory, 'tiles', 'manifest.json'), manifest)
    if dataset.labels:
        _dump_json(os.path.join(directory, 'tiles', 'labels.json'),
                   {str(k): v for k, v in sorted(dataset.labels.items())})

    sections = [{'species_id': t.species_id, 'section_id': t.section_id, 'row': row}
                for row, t in enumerate(dataset.texts)]
    _dump_json(os.path.join(directory, 'text', 'sections.json'),
               {'d_txt': dataset.text_dim, 'sections': sections})
    embeddings = np.stack([t.embedding for t in dataset.texts]) if dataset.texts else np.zeros((0, 0))
    with open(os.path.join(directory, 'text', 'embeddings.bin'), 'wb') as handle:
        handle.write(_float32_bytes(embeddings))
    if dataset.text_prototypes is not None:
        prototypes = np.asarray(dataset.text_prototypes)
        pd.DataFrame(prototypes, columns=[f'd{i}' for i in range(prototypes.shape[1])]).to_csv(
            os.path.join(directory, 'text', 'habitats.csv'), index=False, lineterminator='\n')
    logger.info(f"Wrote dataset to {directory}: {len(dataset.observations)} observations, "
                f"{len(dataset.tiles)} tiles, {len(dataset.texts)} text sections")


def _ingest_observations(directory):
    source = 'observations.csv'
    path = os.path.join(directory, source)
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            header = handle.readline().strip().lstrip('\ufeff')
    except OSError as exc:
        raise DataError(source, f'cannot read file: {exc}') from None
    if header.split(',') != OBSERVATION_COLUMNS:
        raise DataError(source, f'malformed header {header!r}, expected {",".join(OBSERVATION_COLUMNS)}')
    frame = pd.read_csv(path, float_precision='round_trip')
    if frame['species_id'].dtype.kind not in 'iu':
        bad = pd.to_numeric(frame['species_id'], errors='coerce')
        rows = np.flatnonzero(~np.isfinite(bad.to_numpy(dtype=np.float64)) | (bad % 1 != 0).to_numpy())
        raise DataError(source, 'species_id is not an integer', int(rows[0]) if rows.size else None)
    observations = []
    for index, (lat, lon, species) in enumerate(frame[OBSERVATION_COLUMNS].itertuples(index=False)):
        observation = GeoObservation(float(lat), float(lon), int(species))
        observation.validate(source, index)
        observations.append(observation)
    return observations


def _ingest_raster(directory):
    header = _load_json(os.path.join(directory, 'raster.json'), 'raster.json')
    _require_keys(header, ['rows', 'cols', 'channels', 'lat0', 'lon0', 'dlat', 'dlon',
                           'channel_min', 'channel_max'], 'raster.json')
    shape = (int(header['rows']), int(header['cols']), int(header['channels']))
    values = _read_float32(os.path.join(directory, 'raster.bin'), 'raster.bin')
    if values.size != shape[0] * shape[1] * shape[2]:
        raise DataError('raster.bin', f'length mismatch: {values.size} values for shape {shape}')
    if len(header['channel_min']) != shape[2] or len(header['channel_max']) != shape[2]:
        raise DataError('raster.json', 'channel_min/channel_max length does not match channels')
    try:
        return CovariateRaster(float(header['lat0']), float(header['lon0']), float(header['dlat']),
                               float(header['dlon']), values.reshape(shape),
                               np.array(header['channel_min'], dtype=np.float64),
                               np.array(header['channel_max'], dtype=np.float64))
    except ValidationError as exc:
        raise DataError('raster.json', str(exc)) from None


def _ingest_tiles(directory):
    source = 'tiles/manifest.json'
    manifest = _load_json(os.path.join(directory, 'tiles', 'manifest.json'), source)
    if not isinstance(manifest, list):
        raise DataError(source, 'malformed header, expected a list of tiles')
    tiles = []
    seen = set()
    for index, record in enumerate(manifest):
        _require_keys(record, ['tile_id', 'lat', 'lon', 'timestamp', 'file', 'c', 'h', 'w'], source, index)
        if record['tile_id'] in seen:
            raise DataError(source, f'duplicate tile_id {record["tile_id"]}', index)
        seen.add(record['tile_id'])
        if not -90.0 <= record['lat'] <= 90.0:
            raise DataError(source, 'lat out of range', index)
        if not -180.0 <= record['lon'] < 180.0:
            raise DataError(source, 'lon out of range', index)
        shape = (int(record['c']), int(record['h']), int(record['w']))
        pixels = _read_float32(os.path.join(directory, 'tiles', record['file']), f'tiles/{record["file"]}')
        if pixels.size != shape[0] * shape[1] * shape[2]:
            raise DataError(source, f'tile file holds {pixels.size} values, expected shape {shape}', index)
        tile = TileRecord(int(record['tile_id']), float(record['lat']), float(record['lon']),
                          int(record['timestamp']), pixels.reshape(shape))
        tile.validate(source, index)
        tiles.append(tile)
    labels = {}
    labels_path = os.path.join(directory, 'tiles', 'labels.json')
    if os.path.exists(labels_path):
        labels = {int(k): v for k, v in _load_json(labels_path, 'tiles/labels.json').items()}
    return tiles, labels


def _ingest_texts(directory):
    source = 'text/sections.json'
    header = _load_json(os.path.join(directory, 'text', 'sections.json'), source)
    if not isinstance(header, dict):
        raise DataError(source, 'malformed header, expected an object with d_txt and sections')
    _require_keys(header, ['d_txt', 'sections'], source)
    dim = int(header['d_txt'])
    flat = _read_float32(os.path.join(directory, 'text', 'embeddings.bin'), 'text/embeddings.bin')
    if dim <= 0 or flat.size % dim:
        raise DataError('text/embeddings.bin', f'length {flat.size} not divisible by d_txt={dim}')
    matrix = flat.reshape(-1, dim)
    if not np.all(np.isfinite(matrix)):
        raise DataError('text/embeddings.bin', 'non-finite embedding values')
    texts = []
    for index, record in enumerate(header['sections']):
        _require_keys(record, ['species_id', 'section_id', 'row'], source, index)
        row = int(record['row'])
        if not 0 <= row < matrix.shape[0]:
            raise DataError(source, f'row {row} outside embeddings matrix of {matrix.shape[0]} rows', index)
        if int(record['species_id']) < 0:
            raise DataError(source, 'species_id out of range', index)
        texts.append(TextSection(int(record['species_id']), int(record['section_id']), matrix[row].copy()))
    prototypes = None
    prototypes_path = os.path.join(directory, 'text', 'habitats.csv')
    if os.path.exists(prototypes_path):
        prototypes = pd.read_csv(prototypes_path, float_precision='round_trip').to_numpy(dtype=np.float64)
    return texts, prototypes


def ingest_dataset(directory):
    """Load and validate a dataset directory."""
    if not os.path.isdir(directory):
        raise DataError(str(directory), 'dataset directory not found')
    observations = _ingest_observations(directory)
    raster = _ingest_raster(directory)
    tiles, labels = _ingest_tiles(directory)
    texts, prototypes = _ingest_texts(directory)
    species_count = max([t.species_id for t in texts], default=-1) + 1
    for index, observation in enumerate(observations):
        if observation.species_id >= species_count:
            logger.warning(f"Observation row {index} has species {observation.species_id} without text sections")
            break
    logger.info(f"Ingested {directory}: {len(observations)} observations, {len(tiles)} tiles, "
                f"{len(texts)} text sections, raster {raster.rows}x{raster.cols}x{raster.channels}")
    return Dataset(observations, raster, tiles, texts, labels, prototypes)
