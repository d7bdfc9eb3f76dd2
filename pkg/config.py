import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _env_int(name, default):
    return int(os.environ.get(name, default))


def _env_float(name, default):
    return float(os.environ.get(name, default))


class Config:
    """Base configuration"""

    # Reproducibility
    SEED = _env_int('WILDSAT_SEED', 0)

    # Optimization (Adam, no schedule, no weight decay)
    EPOCHS = _env_int('WILDSAT_EPOCHS', 25)
    BATCH_SIZE = _env_int('WILDSAT_BATCH_SIZE', 64)
    LEARNING_RATE = _env_float('WILDSAT_LR', 1e-4)
    TEMPERATURE = _env_float('WILDSAT_TEMPERATURE', 0.07)
    PREFETCH = _env_int('WILDSAT_PREFETCH', 2)

    # Model dimensions
    EMBED_DIM = _env_int('WILDSAT_EMBED_DIM', 64)
    IMAGE_FEATURE_DIM = _env_int('WILDSAT_IMAGE_FEATURE_DIM', 128)
    IMAGE_WIDTHS = (16, 32)
    IMAGE_SIZE = _env_int('WILDSAT_IMAGE_SIZE', 32)
    LOCATION_DIM = _env_int('WILDSAT_LOCATION_DIM', 64)
    LOCATION_HIDDEN = _env_int('WILDSAT_LOCATION_HIDDEN', 64)
    LOCATION_DEPTH = _env_int('WILDSAT_LOCATION_DEPTH', 3)
    TEXT_DIM = _env_int('WILDSAT_TEXT_DIM', 64)

    # Augmentation
    CROP_SIZE = _env_int('WILDSAT_CROP_SIZE', 24)
    JITTER = _env_float('WILDSAT_JITTER', 0.05)
    CHANNEL_MIX = _env_float('WILDSAT_CHANNEL_MIX', 0.1)

    # Pairing
    MATCHING_RADIUS = _env_float('WILDSAT_MATCHING_RADIUS', 0.05)

    # Probing
    PROBE_EPOCHS = _env_int('WILDSAT_PROBE_EPOCHS', 200)
    PROBE_LR = _env_float('WILDSAT_PROBE_LR', 1e-3)

    # Logging
    LOG_LEVEL = os.environ.get('WILDSAT_LOG_LEVEL', 'INFO')


class DeskConfig(Config):
    """Desk-scale configuration (CPU, minutes)"""
    PROFILE = 'desk'


class FullScaleConfig(Config):
    """Dimensions and hyperparameters of the full-scale setup"""
    PROFILE = 'full'
    EMBED_DIM = 512
    LOCATION_DIM = 256
    LOCATION_HIDDEN = 256
    EPOCHS = 25
    BATCH_SIZE = 64
    LEARNING_RATE = 1e-4


class TestingConfig(Config):
    """Testing configuration"""
    PROFILE = 'testing'
    EPOCHS = 1
    BATCH_SIZE = 4
    EMBED_DIM = 8
    IMAGE_FEATURE_DIM = 8
    IMAGE_WIDTHS = (4, 4)
    IMAGE_SIZE = 8
    LOCATION_DIM = 8
    LOCATION_HIDDEN = 8
    LOCATION_DEPTH = 2
    TEXT_DIM = 8
    CROP_SIZE = 6
    PREFETCH = 0
    PROBE_EPOCHS = 50
    LOG_LEVEL = 'WARNING'


# Configuration dictionary
config = {
    'desk': DeskConfig,
    'full': FullScaleConfig,
    'testing': TestingConfig,
    'default': DeskConfig
}


def get_config(profile=None):
    """Get configuration based on WILDSAT_PROFILE environment variable"""
    env = profile or os.environ.get('WILDSAT_PROFILE', 'desk')
    return config.get(env, config['default'])
