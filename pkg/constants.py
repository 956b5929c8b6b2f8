"""
Useful constant variables
"""

import os
from pathlib import Path

PROJECT_ROOT = Path(__file__).parent
ASSETS_PATH = PROJECT_ROOT / 'tmp'
DATASET_PATH = ASSETS_PATH / 'dataset'
RUNS_PATH = ASSETS_PATH / 'runs'
TRAIN_CONFIG_PATH = PROJECT_ROOT / 'train_config.json'
SYNTH_CONFIG_PATH = PROJECT_ROOT / 'synth_config.json'

# network input
IMAGE_HEIGHT = 240
IMAGE_WIDTH = 320
IMAGE_SHAPE = (1, IMAGE_HEIGHT, IMAGE_WIDTH)

# architecture tables
CONV_WIDTHS = (64, 96, 144, 216, 324, 486)
CONV_FLATTENED_FEATURES = 9720
FC_WIDTHS = (2000, 1000)
PENULTIMATE_WIDTH = 160
INPUT_PCA_COMPONENTS = 3000
DROPOUT_PROBABILITY = 0.2

# PCA defaults
VARIANCE_FRACTION = 0.999
MESH_PCA_MAX_COMPONENTS = PENULTIMATE_WIDTH
IMAGE_PCA_MAX_COMPONENTS = INPUT_PCA_COMPONENTS

# augmentation ramp and luma weights
AUGMENT_RAMP_EPOCHS = 5
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# file formats
CHECKPOINT_MAGIC = b'FCAP'
CHECKPOINT_VERSION = 1
VTX_MAGIC = b'VTX1'
MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1
UNITS = 'cm'
EFFECTIVE_CONFIG_NAME = 'config.json'

SHOT_CATEGORIES = ('range-of-motion', 'facs', 'pangram', 'in-character')

SEED_ENV_VARIABLE = 'FCAP_SEED'
FLOAT64_ENV_VARIABLE = 'FCAP_FLOAT64'
USE_FLOAT64 = os.environ.get(FLOAT64_ENV_VARIABLE, '0') == '1'
