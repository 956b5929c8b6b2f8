"""
Principal component bases for output meshes and input images, and scalar input whitening
"""
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from loguru import logger

from core_utils.errors import DataError, DimensionError, ParameterError


class InsufficientDataError(DataError):
    """
    Fewer than two samples to fit a basis
    """


class DegenerateDataError(DataError):
    """
    Data has no variance to normalize by
    """


@dataclass(frozen=True)
class PcaBasis:
    """
    Mean vector, orthonormal component rows and their variances
    """
    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    total_variance: float

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dimension(self) -> int:
        return self.components.shape[1]

    def explained_ratio(self) -> np.ndarray:
        """
        Cumulative fraction of the total variance explained by the first 1..k components
        """
        if self.total_variance <= 0:
            return np.ones(self.k)
        return np.cumsum(self.variances) / self.total_variance

    def explained_fraction(self) -> float:
        if self.k == 0:
            return 0.0
        return float(self.explained_ratio()[-1])


@dataclass(frozen=True)
class WhiteningStats:
    """
    One global mean and standard deviation over all training pixels
    """
    mean: float
    std: float


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """
    Makes the largest-magnitude entry of each component positive
    """
    if components.size == 0:
        return components
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), pivots])
    signs[signs == 0] = 1
    return components * signs[:, None]


def fit_pca(data: np.ndarray, n_components: Optional[int] = None,
            variance_fraction: Optional[float] = None,
            max_components: Optional[int] = None) -> PcaBasis:
    """
    Fits a PCA basis to the rows of an M x D matrix.

    Either n_components fixes k, or variance_fraction selects the smallest k whose
    cumulative explained variance reaches the fraction. max_components caps k.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f'PCA expects an M x D matrix, received shape {data.shape}')
    samples, dimension = data.shape
    if samples < 2:
        raise InsufficientDataError(f'PCA needs at least 2 samples, received {samples}')
    if (n_components is None) == (variance_fraction is None):
        raise ParameterError('Give exactly one of n_components or variance_fraction')
    if variance_fraction is not None and not 0 < variance_fraction <= 1:
        raise ParameterError(f'Variance fraction must be in (0, 1], received {variance_fraction}')
    if n_components is not None and n_components < 1:
        raise ParameterError(f'Component count must be positive, received {n_components}')

    mean = data.mean(axis=0)
    centered = data - mean
    _, singular_values, right_vectors = np.linalg.svd(centered, full_matrices=False)
    all_variances = singular_values ** 2 / (samples - 1)
    total_variance = float(all_variances.sum())

    limit = min(samples - 1, dimension)
    if n_components is not None:
        count = n_components
    else:
        ratios = np.cumsum(all_variances) / total_variance if total_variance > 0 \
            else np.ones_like(all_variances)
        count = min(int(np.searchsorted(ratios, variance_fraction - 1e-12)) + 1, len(ratios))
    if max_components is not None:
        count = min(count, max_components)
    if count > limit:
        logger.warning('Requested {} components but data supports at most {}; clamping',
                       count, limit)
        count = limit

    components = _fix_signs(right_vectors[:count])
    basis = PcaBasis(mean=mean, components=components,
                     variances=all_variances[:count].copy(), total_variance=total_variance)
    logger.info('Fitted PCA: {} samples, {} dims, k={}, explained {:.6f}',
                samples, dimension, basis.k, basis.explained_fraction())
    return basis


def complete_basis(basis: PcaBasis, count: int, seed: int = 0) -> PcaBasis:
    """
    Pads a basis to count rows with orthonormal zero-variance directions
    orthogonal to the fitted ones
    """
    missing = count - basis.k
    if missing <= 0:
        return basis
    if count > basis.dimension:
        raise ParameterError(f'Cannot complete a basis of dimension {basis.dimension} '
                             f'to {count} orthonormal components')

    components = basis.components
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((basis.dimension, missing))
    # project out the fitted span twice
    for _ in range(2):
        extra -= components.T @ (components @ extra)
    extra, _ = np.linalg.qr(extra)

    logger.warning('Output data supports {} components, padding to {} with zero-variance '
                   'directions', basis.k, count)
    return PcaBasis(mean=basis.mean,
                    components=np.vstack([components, _fix_signs(extra.T)]),
                    variances=np.concatenate([basis.variances, np.zeros(missing)]),
                    total_variance=basis.total_variance)


def project(basis: PcaBasis, sample: np.ndarray) -> np.ndarray:
    """
    Coefficients of one sample (length D) or of the rows of a batch (N x D)
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[-1] != basis.dimension:
        raise DimensionError(f'Sample width {sample.shape[-1]} does not match basis '
                             f'dimension {basis.dimension}')
    return (sample - basis.mean) @ basis.components.T


def reconstruct(basis: PcaBasis, coefficients: np.ndarray) -> np.ndarray:
    """
    mean + components^T . coefficients, for one coefficient vector or a batch
    """
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape[-1] != basis.k:
        raise DimensionError(f'Expected {basis.k} coefficients, received {coefficients.shape[-1]}')
    return basis.mean + coefficients @ basis.components


def fit_whitening(images: Iterable[np.ndarray]) -> WhiteningStats:
    """
    Mean and standard deviation over the union of all pixels of all images
    """
    images = list(images)
    count = 0
    total = 0.0
    total_squares = 0.0
    for image in images:
        pixels = np.asarray(image, dtype=np.float64)
        count += pixels.size
        total += float(pixels.sum())
    if count == 0:
        raise InsufficientDataError('Whitening needs at least one non-empty image')
    mean = total / count

    for image in images:
        centered = np.asarray(image, dtype=np.float64) - mean
        total_squares += float(np.sum(centered * centered))
    std = float(np.sqrt(total_squares / count))
    if not std > 0:
        raise DegenerateDataError('Training pixels have zero variance, cannot whiten')

    logger.info('Fitted whitening over {} pixels: mean {:.6f}, std {:.6f}', count, mean, std)
    return WhiteningStats(mean=float(mean), std=std)


def apply_whitening(image: np.ndarray, stats: WhiteningStats) -> np.ndarray:
    """
    (pixel - mean) / std with the frozen training statistics
    """
    if not stats.std > 0:
        raise ParameterError(f'Whitening std must be positive, received {stats.std}')
    image = np.asarray(image)
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32
    return ((image - stats.mean) / stats.std).astype(dtype, copy=False)
