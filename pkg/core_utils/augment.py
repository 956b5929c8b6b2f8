"""
Training-time image augmentation with a linear strength ramp
"""
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import cv2
import numpy as np
from loguru import logger

from constants import AUGMENT_RAMP_EPOCHS, IMAGE_HEIGHT, IMAGE_WIDTH
from core_utils.errors import ParameterError
from core_utils.seeding import AUGMENT_STREAM, derive_seed

FILL_MODES = {
    'edge': cv2.BORDER_REPLICATE,
    'black': cv2.BORDER_CONSTANT,
}


class IncorrectAugmentConfigError(ParameterError):
    """
    Augmentation ranges do not contain the identity transform or are malformed
    """


class RejectedAugmentationError(ParameterError):
    """
    Augmentation exists only as a switch and cannot be enabled
    """


def _contains_identity(bounds, identity: float) -> bool:
    return len(bounds) == 2 and bounds[0] <= identity <= bounds[1]


@dataclass(frozen=True)
class AugmentConfig:
    """
    Magnitudes of every augmentation at full strength
    """
    max_translate: float = 0.05
    max_rotate: float = 5.0
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    max_brightness: float = 0.10
    contrast_range: Tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.0
    gamma_range: Tuple[float, float] = (1.0, 1.0)
    perspective: bool = False
    fill: str = 'edge'

    def __post_init__(self):
        for name in ('zoom_range', 'contrast_range', 'gamma_range'):
            object.__setattr__(self, name, tuple(float(bound) for bound in getattr(self, name)))

        for name in ('max_translate', 'max_rotate', 'max_brightness', 'noise_std'):
            if getattr(self, name) < 0:
                raise IncorrectAugmentConfigError(f'{name} must not be negative')
        if not _contains_identity(self.zoom_range, 1.0) or self.zoom_range[0] <= 0:
            raise IncorrectAugmentConfigError(f'zoom_range {self.zoom_range} must contain 1')
        if not _contains_identity(self.contrast_range, 1.0):
            raise IncorrectAugmentConfigError(f'contrast_range {self.contrast_range} must contain 1')
        if not _contains_identity(self.gamma_range, 1.0) or self.gamma_range[0] <= 0:
            raise IncorrectAugmentConfigError(f'gamma_range {self.gamma_range} must contain 1')
        if self.fill not in FILL_MODES:
            raise IncorrectAugmentConfigError(f'fill must be one of {", ".join(FILL_MODES)}')
        if self.perspective:
            raise RejectedAugmentationError('Perspective augmentation is not available')
        if self.noise_std > 0 or self.gamma_range != (1.0, 1.0):
            logger.warning('Noise or gamma augmentation enabled; both are known to hurt learning')

    @classmethod
    def from_dict(cls, values: dict) -> 'AugmentConfig':
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise IncorrectAugmentConfigError(f'Unknown augmentation keys: {sorted(unknown)}')
        return cls(**values)

    def to_dict(self) -> dict:
        values = asdict(self)
        for name in ('zoom_range', 'contrast_range', 'gamma_range'):
            values[name] = list(values[name])
        return values


@dataclass(frozen=True)
class AugmentParams:
    """
    One concrete draw of augmentation parameters
    """
    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0
    zoom: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def is_geometric_identity(self) -> bool:
        return self.tx == 0 and self.ty == 0 and self.angle == 0 and self.zoom == 1

    def is_photometric_identity(self) -> bool:
        return self.brightness == 0 and self.contrast == 1


def strength_at(global_step: int, steps_per_epoch: int) -> float:
    """
    Linear ramp from 0 at the first step to 1 after five epochs
    """
    if steps_per_epoch < 1:
        raise ParameterError(f'steps_per_epoch must be at least 1, received {steps_per_epoch}')
    return min(1.0, global_step / (AUGMENT_RAMP_EPOCHS * steps_per_epoch))


def sample_seed(global_seed: int, epoch: int, sample_index: int) -> int:
    """
    Per-sample augmentation seed, independent of batch composition and worker count
    """
    return derive_seed(global_seed, AUGMENT_STREAM, epoch, sample_index)


def _scaled_range(bounds: Tuple[float, float], strength: float) -> Tuple[float, float]:
    return 1.0 + strength * (bounds[0] - 1.0), 1.0 + strength * (bounds[1] - 1.0)


def sample_params(seed: int, config: AugmentConfig, strength: float,
                  image_shape: Tuple[int, int] = (IMAGE_HEIGHT, IMAGE_WIDTH)) -> AugmentParams:
    """
    Draws every parameter uniformly from its range scaled by strength around the identity
    """
    if not 0 <= strength <= 1:
        raise ParameterError(f'Augmentation strength must be in [0, 1], received {strength}')
    height, width = image_shape
    rng = np.random.default_rng(seed)
    symmetric = rng.uniform(-1.0, 1.0, size=4)
    unit = rng.random(3)
    noise_seed = int(rng.integers(0, 2 ** 32))

    zoom_low, zoom_high = _scaled_range(config.zoom_range, strength)
    contrast_low, contrast_high = _scaled_range(config.contrast_range, strength)
    gamma_low, gamma_high = _scaled_range(config.gamma_range, strength)

    return AugmentParams(
        tx=float(symmetric[0] * strength * config.max_translate * width),
        ty=float(symmetric[1] * strength * config.max_translate * height),
        angle=float(symmetric[2] * strength * config.max_rotate),
        zoom=float(zoom_low + unit[0] * (zoom_high - zoom_low)),
        brightness=float(symmetric[3] * strength * config.max_brightness),
        contrast=float(contrast_low + unit[1] * (contrast_high - contrast_low)),
        gamma=float(gamma_low + unit[2] * (gamma_high - gamma_low)),
        noise_std=float(strength * config.noise_std),
        seed=noise_seed,
    )


def pose_matrix(angle: float, zoom: float, tx: float, ty: float,
                image_shape: Tuple[int, int]) -> np.ndarray:
    """
    2 x 3 affine map: rotate by angle degrees and scale by zoom about the image center,
    then translate by (tx, ty) pixels
    """
    height, width = image_shape
    center = ((width - 1) / 2.0, (height - 1) / 2.0)
    matrix = cv2.getRotationMatrix2D(center, angle, zoom)
    matrix[0, 2] += tx
    matrix[1, 2] += ty
    return matrix


def warp(image: np.ndarray, matrix: np.ndarray, fill: str = 'edge') -> np.ndarray:
    """
    Bilinear resampling of a grayscale image under a 2 x 3 affine map
    """
    height, width = image.shape
    return cv2.warpAffine(np.asarray(image, dtype=np.float32), matrix, (width, height),
                          flags=cv2.INTER_LINEAR, borderMode=FILL_MODES[fill], borderValue=0.0)


def apply(image: np.ndarray, params: AugmentParams,
          config: Optional[AugmentConfig] = None) -> np.ndarray:
    """
    Geometric transform, then brightness and contrast, then the optional
    gamma and noise; the result is clamped to [0, 1]
    """
    fill = config.fill if config is not None else 'edge'
    result = np.asarray(image, dtype=np.float32)

    if not params.is_geometric_identity():
        matrix = pose_matrix(params.angle, params.zoom, params.tx, params.ty, result.shape)
        result = warp(result, matrix, fill)
    if not params.is_photometric_identity():
        result = np.float32(params.contrast) * (result - np.float32(0.5)) \
            + np.float32(0.5 + params.brightness)
    if params.gamma != 1:
        result = np.clip(result, 0.0, 1.0) ** np.float32(params.gamma)
    if params.noise_std > 0:
        noise = np.random.default_rng(params.seed).normal(0.0, params.noise_std, result.shape)
        result = result + noise.astype(np.float32)

    return np.clip(result, 0.0, 1.0).astype(np.float32, copy=False)
