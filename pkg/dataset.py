"""
Synthetic capture generator, preprocessing and train / validation splitting
"""
import json
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from loguru import logger
from tqdm import tqdm

from constants import (DATASET_PATH, IMAGE_HEIGHT, IMAGE_WIDTH, LUMA_WEIGHTS, MANIFEST_NAME,
                       SHOT_CATEGORIES, SYNTH_CONFIG_PATH)
from core_utils.augment import pose_matrix, warp
from core_utils.errors import DataError, ParameterError, UsageError
from core_utils.frame import FrameDataset, FrameRecord, Shot
from core_utils.seeding import SPLIT_STREAM, derive_seed

# semi-axes of the face ellipsoid in centimeters: half width, half height, depth
FACE_SEMI_AXES = (7.0, 10.0, 5.0)
# vertices above this fraction of the half height form the rigid forehead band
RIGID_BAND_START = 0.65
PIXELS_PER_CM_RATIO = 0.04
BOUNDING_BOX_CM = 30.0

CATEGORY_AMPLITUDE = {
    'range-of-motion': 1.0,
    'facs': 0.8,
    'pangram': 0.6,
    'in-character': 0.7,
}


class IncorrectSynthConfigError(ParameterError):
    """
    Generator configuration violates its invariants
    """


class SplitError(DataError):
    """
    Dataset has too few shots to split at shot granularity
    """


def _default_shot_plan() -> Dict[str, int]:
    return {'range-of-motion': 1, 'facs': 1, 'pangram': 6, 'in-character': 14}


@dataclass
class SynthConfig:
    """
    Parameters of the deterministic synthetic capture generator
    """
    vertex_count: int = 500
    latent_dim: int = 20
    shot_plan: Dict[str, int] = field(default_factory=_default_shot_plan)
    frames_per_shot: int = 150
    max_translate: float = 0.02
    max_rotate: float = 2.0
    max_zoom: float = 0.03
    splat_sigma: float = 2.0
    latent_amplitude: float = 1.0
    motion_scale: float = 1.0
    image_height: int = IMAGE_HEIGHT
    image_width: int = IMAGE_WIDTH
    seed: int = 0

    def __post_init__(self):
        if self.vertex_count < 1 or self.latent_dim < 1:
            raise IncorrectSynthConfigError('vertex_count and latent_dim must be positive')
        if self.latent_dim > self.vertex_count:
            raise IncorrectSynthConfigError(f'latent_dim {self.latent_dim} exceeds '
                                            f'vertex_count {self.vertex_count}')
        if not self.shot_plan:
            raise IncorrectSynthConfigError('Shot plan is empty')
        for category, count in self.shot_plan.items():
            if category not in SHOT_CATEGORIES:
                raise IncorrectSynthConfigError(f'Unknown shot category: {category}')
            if not isinstance(count, int) or count < 1:
                raise IncorrectSynthConfigError(f'Shot count for {category} must be at least 1')
        if self.frames_per_shot < 1:
            raise IncorrectSynthConfigError('frames_per_shot must be at least 1')
        if self.image_height < 1 or self.image_width < 1:
            raise IncorrectSynthConfigError('Image extents must be positive')
        if self.splat_sigma <= 0:
            raise IncorrectSynthConfigError('splat_sigma must be positive')
        for name in ('max_translate', 'max_rotate', 'max_zoom', 'latent_amplitude', 'motion_scale'):
            if getattr(self, name) < 0:
                raise IncorrectSynthConfigError(f'{name} must not be negative')
        if self.max_zoom >= 1:
            raise IncorrectSynthConfigError('max_zoom must be below 1')
        if self.motion_scale * self.latent_amplitude * 3 > BOUNDING_BOX_CM / 2:
            raise IncorrectSynthConfigError(f'Motion does not fit the {BOUNDING_BOX_CM} cm box')

    @classmethod
    def from_dict(cls, values: dict) -> 'SynthConfig':
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise IncorrectSynthConfigError(f'Unknown generator keys: {sorted(unknown)}')
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_synth_config(config_path: Union[str, Path] = SYNTH_CONFIG_PATH) -> SynthConfig:
    """
    Reads and validates a generator config
    """
    try:
        with open(config_path, encoding='utf-8') as file:
            values = json.load(file)
    except (OSError, json.JSONDecodeError) as error:
        raise IncorrectSynthConfigError(f'{config_path}: cannot read config ({error})') from error
    if not isinstance(values, dict):
        raise IncorrectSynthConfigError(f'{config_path}: config must be a JSON object')
    try:
        return SynthConfig.from_dict(values)
    except TypeError as error:
        raise IncorrectSynthConfigError(f'{config_path}: {error}') from error


class OutputDirectoryError(UsageError):
    """
    Output folder holds files that are not a dataset
    """


def prepare_environment(base_path: Union[str, Path], overwrite: bool = False) -> None:
    """
    Creates an empty output folder. An existing folder is replaced only when it
    is empty, already holds a dataset manifest, or overwrite is set
    """
    path = Path(base_path)
    if path.exists():
        if not path.is_dir():
            raise OutputDirectoryError(f'{path}: output path exists and is not a directory')
        holds_dataset = (path / MANIFEST_NAME).is_file()
        if any(path.iterdir()) and not holds_dataset and not overwrite:
            raise OutputDirectoryError(f'{path}: directory is not empty and holds no '
                                       f'{MANIFEST_NAME}, refusing to replace it')
        shutil.rmtree(path)
    path.mkdir(parents=True)


class FaceModel:
    """
    Linear deformable face: base mesh V0, deformation basis B and rendering attributes
    """

    def __init__(self, config: SynthConfig):
        self.config = config
        rng = np.random.default_rng(derive_seed(config.seed, 0))
        count = config.vertex_count

        azimuth = rng.uniform(-1.2, 1.2, count)
        elevation = rng.uniform(-1.0, 1.0, count)
        half_width, half_height, depth = FACE_SEMI_AXES
        self.base_mesh = np.stack([
            half_width * np.sin(azimuth) * np.cos(elevation),
            half_height * np.sin(elevation),
            depth * np.cos(azimuth) * np.cos(elevation),
        ], axis=1)

        self.mask = self.base_mesh[:, 1] < RIGID_BAND_START * half_height
        if not self.mask.any():
            self.mask[np.argmin(self.base_mesh[:, 1])] = True
        self.albedo = rng.uniform(0.3, 0.7, count)

        animated = int(self.mask.sum())
        rows = 3 * animated
        columns = min(config.latent_dim, rows)
        orthonormal, _ = np.linalg.qr(rng.normal(size=(rows, columns)))
        falloff = np.linspace(1.0, 0.4, columns)
        scale = config.motion_scale * np.sqrt(animated) / np.sqrt(config.latent_dim)

        self.basis = np.zeros((count, 3, config.latent_dim))
        motion = orthonormal * falloff * scale
        self.basis[self.mask, :, :columns] = motion.reshape(animated, 3, columns)

    def deform(self, latent: np.ndarray) -> np.ndarray:
        """
        V(z) = V0 + B.z for one latent vector
        """
        return self.base_mesh + self.basis @ latent

    def render(self, vertices: np.ndarray, pose: Tuple[float, float, float, float]) -> np.ndarray:
        """
        Orthographic projection, 2D pose, then one additive Gaussian splat per vertex
        """
        height, width = self.config.image_height, self.config.image_width
        pixels_per_cm = PIXELS_PER_CM_RATIO * height
        points = np.stack([
            (width - 1) / 2.0 + vertices[:, 0] * pixels_per_cm,
            (height - 1) / 2.0 - vertices[:, 1] * pixels_per_cm,
            np.ones(len(vertices)),
        ], axis=1)
        tx, ty, angle, zoom = pose
        points = points @ pose_matrix(angle, zoom, tx, ty, (height, width)).T

        sigma = self.config.splat_sigma
        horizontal = np.exp(-(np.arange(width)[None, :] - points[:, :1]) ** 2 / (2 * sigma ** 2))
        vertical = np.exp(-(np.arange(height)[None, :] - points[:, 1:2]) ** 2 / (2 * sigma ** 2))
        splats = vertical.T @ (self.albedo[:, None] * horizontal)
        return (1.0 - np.exp(-splats)).astype(np.float32)


def _smooth_walk(rng: np.random.Generator, frames: int, dimension: int,
                 amplitude: float) -> np.ndarray:
    """
    Momentum random walk squashed into [-amplitude, amplitude]
    """
    state = rng.normal(0.0, 0.5, dimension)
    velocity = np.zeros(dimension)
    walk = np.empty((frames, dimension))
    for index in range(frames):
        velocity = 0.9 * velocity + 0.05 * rng.normal(size=dimension)
        state = state + velocity
        walk[index] = np.tanh(state)
    return amplitude * walk


def _keyframe_walk(rng: np.random.Generator, frames: int, dimension: int,
                   amplitude: float, single_component: bool) -> np.ndarray:
    """
    Raised-cosine blends between keyframes. Range-of-motion keyframes sit at the
    latent extremes; facs keyframes activate one component at a time
    """
    spacing = 15
    keyframe_count = frames // spacing + 2
    if single_component:
        keys = np.zeros((keyframe_count, dimension))
        active = rng.integers(0, dimension, keyframe_count)
        keys[np.arange(keyframe_count), active] = rng.choice([-1.0, 1.0], keyframe_count)
        keys[::2] = 0.0
    else:
        keys = rng.choice([-1.0, 1.0], size=(keyframe_count, dimension))
    walk = np.empty((frames, dimension))
    for index in range(frames):
        segment, offset = divmod(index, spacing)
        weight = (1 - np.cos(np.pi * offset / spacing)) / 2
        walk[index] = (1 - weight) * keys[segment] + weight * keys[segment + 1]
    return amplitude * walk


def latent_track(config: SynthConfig, category: str, shot_id: int) -> np.ndarray:
    """
    F x K latent coefficients of one shot
    """
    rng = np.random.default_rng(derive_seed(config.seed, 1, shot_id))
    amplitude = config.latent_amplitude * CATEGORY_AMPLITUDE[category]
    frames, dimension = config.frames_per_shot, config.latent_dim
    if amplitude == 0:
        return np.zeros((frames, dimension))
    if category == 'range-of-motion':
        return _keyframe_walk(rng, frames, dimension, amplitude, single_component=False)
    if category == 'facs':
        return _keyframe_walk(rng, frames, dimension, amplitude, single_component=True)
    return _smooth_walk(rng, frames, dimension, amplitude)


def pose_track(config: SynthConfig, shot_id: int) -> np.ndarray:
    """
    F x 4 poses (tx, ty, angle, zoom) drawn uniformly inside the jitter bounds
    """
    rng = np.random.default_rng(derive_seed(config.seed, 2, shot_id))
    unit = rng.uniform(-1.0, 1.0, size=(config.frames_per_shot, 4))
    return np.stack([
        unit[:, 0] * config.max_translate * config.image_width,
        unit[:, 1] * config.max_translate * config.image_height,
        unit[:, 2] * config.max_rotate,
        1.0 + unit[:, 3] * config.max_zoom,
    ], axis=1)


def generate_synthetic(config: SynthConfig) -> FrameDataset:
    """
    Renders every shot of the plan. Targets are the pose-free vertices;
    the pose only shows up in the image
    """
    face = FaceModel(config)
    shots = []
    plan = [category for category in SHOT_CATEGORIES
            for _ in range(config.shot_plan.get(category, 0))]

    for shot_id, category in enumerate(tqdm(plan, desc='Rendering shots', leave=False)):
        latents = latent_track(config, category, shot_id)
        poses = pose_track(config, shot_id)
        shot = Shot(shot_id=shot_id, category=category)
        for index in range(config.frames_per_shot):
            vertices = face.deform(latents[index])
            pose = tuple(float(value) for value in poses[index])
            shot.frames.append(FrameRecord(
                image=face.render(vertices, pose),
                vertices=vertices.astype(np.float32),
                shot_id=shot_id,
                frame_index=index,
                category=category,
                pose=pose,
            ))
        shots.append(shot)

    dataset = FrameDataset(shots, config.vertex_count, face.mask)
    logger.info('Generated {} frames in {} shots, {} of {} vertices animated',
                len(dataset), len(shots), int(face.mask.sum()), config.vertex_count)
    return dataset


def preprocess_frame(raw: np.ndarray, crop: Tuple[int, int, int, int],
                     output_shape: Tuple[int, int] = (IMAGE_HEIGHT, IMAGE_WIDTH)) -> np.ndarray:
    """
    Crops (top, left, height, width), converts color to luma and resizes bilinearly.
    Integer inputs are read as 8-bit; the result is float32 in [0, 1]
    """
    raw = np.asarray(raw)
    top, left, height, width = (int(value) for value in crop)
    image_height, image_width = raw.shape[:2]
    if height < 1 or width < 1 or top < 0 or left < 0 \
            or top + height > image_height or left + width > image_width:
        raise ParameterError(f'Crop {crop} is outside the {image_height}x{image_width} image')

    image = raw.astype(np.float32) / np.float32(255.0) if np.issubdtype(raw.dtype, np.integer) \
        else raw.astype(np.float32)
    image = image[top:top + height, left:left + width]
    if image.ndim == 3:
        if image.shape[2] != 3:
            raise ParameterError(f'Color images must have 3 channels, received {image.shape[2]}')
        image = image @ np.asarray(LUMA_WEIGHTS, dtype=np.float32)

    if image.shape != tuple(output_shape):
        image = cv2.resize(image, (output_shape[1], output_shape[0]), interpolation=cv2.INTER_LINEAR)
    return np.clip(image, 0.0, 1.0).astype(np.float32, copy=False)


def stabilize_frame(image: np.ndarray, pose: Sequence[float], fill: str = 'edge') -> np.ndarray:
    """
    Undoes the per-frame 2D head pose of a generated frame
    """
    tx, ty, angle, zoom = pose
    matrix = pose_matrix(angle, zoom, tx, ty, image.shape)
    return warp(image, cv2.invertAffineTransform(matrix), fill)


def stabilized_images(dataset: FrameDataset) -> np.ndarray:
    """
    N x H x W pose-free images, the input of the fully connected network
    """
    if not dataset.has_poses():
        raise DataError('Stabilization needs a per-frame pose for every frame')
    return np.stack([stabilize_frame(frame.image, frame.pose) for frame in dataset.frames()])


def source_images(dataset: FrameDataset, kind: str) -> np.ndarray:
    """
    Images the given network kind reads: stabilized for fully connected, raw for convolutional
    """
    if kind == 'fc':
        return stabilized_images(dataset)
    return dataset.images()


def split(dataset: FrameDataset, validation_fraction: float,
          seed: int) -> Tuple[FrameDataset, FrameDataset]:
    """
    Assigns whole shots to the validation side, in a seed-derived order,
    until it holds the requested fraction of frames
    """
    if not 0 < validation_fraction < 1:
        raise ParameterError(f'Validation fraction must be in (0, 1), received {validation_fraction}')
    if len(dataset.shots) < 2:
        raise SplitError(f'Need at least 2 shots to split, dataset has {len(dataset.shots)}')

    rng = np.random.default_rng(derive_seed(seed, SPLIT_STREAM))
    order = rng.permutation(len(dataset.shots))
    target = validation_fraction * len(dataset)

    validation_ids = []
    validation_frames = 0
    for position in order[:-1]:
        if validation_ids and validation_frames >= target:
            break
        shot = dataset.shots[position]
        validation_ids.append(shot.shot_id)
        validation_frames += len(shot.frames)

    train_ids = [shot.shot_id for shot in dataset.shots if shot.shot_id not in validation_ids]
    train, validation = dataset.subset(train_ids), dataset.subset(validation_ids)
    logger.info('Split {} frames into {} train / {} validation ({} / {} shots)',
                len(dataset), len(train), len(validation), len(train.shots), len(validation.shots))
    return train, validation


def write_dataset(path: Union[str, Path], dataset: FrameDataset) -> None:
    dataset.save(path)


def load_dataset(path: Union[str, Path]) -> FrameDataset:
    return FrameDataset.load(path)


def main(config_path: Optional[Union[str, Path]] = None,
         output_path: Optional[Union[str, Path]] = None) -> FrameDataset:
    """
    Generates the configured corpus into a fresh directory
    """
    config = validate_synth_config(config_path or SYNTH_CONFIG_PATH)
    dataset = generate_synthetic(config)
    if output_path is not None:
        prepare_environment(output_path)
        write_dataset(output_path, dataset)
    return dataset


if __name__ == '__main__':
    main(output_path=DATASET_PATH)
