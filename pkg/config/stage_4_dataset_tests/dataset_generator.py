"""
Generates small datasets and configs with flexible params for testing purposes
"""
import json
import shutil
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from config.test_params import TEST_PATH, TEST_SYNTH_CONFIG_PATH, TEST_SYNTH_PARAMS
from core_utils.frame import FrameDataset, FrameRecord, Shot
from dataset import SynthConfig, generate_synthetic


def generate_test_dataset(**overrides) -> FrameDataset:
    '''
    Renders the small test corpus, optionally with changed generator params
    '''
    params = dict(TEST_SYNTH_PARAMS)
    params.update(overrides)
    return generate_synthetic(SynthConfig(**params))


def generate_config(params: dict, path: Path = TEST_SYNTH_CONFIG_PATH) -> Path:
    '''
    Writes a generator config for testing
    '''
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as file:
        json.dump(params, file)
    return path


def make_dataset(shot_sizes: Sequence[int], vertex_count: int = 4,
                 image_shape: Tuple[int, int] = (2, 2), seed: int = 0) -> FrameDataset:
    '''
    Random frames grouped into shots of the given sizes, without rendering
    '''
    rng = np.random.default_rng(seed)
    shots = []
    for shot_id, size in enumerate(shot_sizes):
        shot = Shot(shot_id=shot_id, category='in-character')
        for index in range(size):
            shot.frames.append(FrameRecord(
                image=rng.random(image_shape).astype(np.float32),
                vertices=rng.normal(size=(vertex_count, 3)).astype(np.float32),
                shot_id=shot_id, frame_index=index, category='in-character'))
        shots.append(shot)
    return FrameDataset(shots, vertex_count)


def clean_test_path() -> None:
    '''
    Removes everything tests wrote
    '''
    if TEST_PATH.exists():
        shutil.rmtree(TEST_PATH)
