import os
import sys

sys.dont_write_bytecode = True

import hypothesis
import numpy as np
import pytest

os.environ.setdefault('WILDSAT_PROFILE', 'testing')

np.seterr(all='warn')

hypothesis.settings.register_profile('fast', max_examples=10, deadline=None)
hypothesis.settings.register_profile('thorough', max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get('HYPOTHESIS_PROFILE', 'fast'))


def pytest_addoption(parser):
    parser.addoption('--slow', action='store_true', default=False, help='run acceptance-scale training tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-scale training runs')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--slow') or 'slow' in (config.getoption('-m') or ''):
        return
    skip = pytest.mark.skip(reason='needs --slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def tiny_world_config(**overrides):
    from instance.seeds.world import SyntheticWorldConfig

    settings = dict(seed=0, species=8, habitats=4, raster_rows=5, raster_cols=5, tiles_per_habitat=8,
                    timestamps_per_site=2, observations=64, sections_per_species=2, text_dim=8,
                    tile_channels=3, tile_size=8)
    settings.update(overrides)
    return SyntheticWorldConfig(**settings)


@pytest.fixture
def tiny_world():
    from instance.seeds.world import generate_synthetic_world

    return generate_synthetic_world(tiny_world_config())


@pytest.fixture
def tiny_samples(tiny_world):
    from geodata import pair_samples

    return pair_samples(tiny_world.observations, tiny_world.tiles, tiny_world.texts, tiny_world.raster,
                        seed=0).samples


@pytest.fixture
def train_config():
    from training import TrainConfig

    config = TrainConfig.from_profile('testing')
    config.prefetch = 0
    return config


@pytest.fixture
def dataset_dir(tmp_path, tiny_world):
    from geodata import write_dataset

    directory = tmp_path / 'world'
    write_dataset(tiny_world.to_dataset(), str(directory))
    return directory
