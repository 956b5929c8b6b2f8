"""
Vertex error metrics, loss to RMSE conversion, CSV export and the inference throughput benchmark
"""
import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from core_utils.errors import DataError, DimensionError, ParameterError
from core_utils.frame import FrameDataset
from core_utils.pca import PcaBasis
from core_utils.visualizer import plot_rmse_series
from dataset import source_images
from model import Checkpoint, forward_batch, predict

CM_TO_MM = 10.0
BENCHMARK_BATCH_SIZES = (1, 200)
THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


class ExportError(DataError):
    """
    Result file cannot be written
    """


@dataclass
class RmseSeries:
    """
    Per-frame RMSE in millimeters over the animated vertices
    """
    values: np.ndarray
    identifiers: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.values)

    def pooled(self) -> float:
        """
        Root of the mean of per-frame mean squared distances
        """
        if not len(self.values):
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.values))))

    def per_shot(self) -> Dict[int, float]:
        squares = {}
        for (shot_id, _), value in zip(self.identifiers, self.values):
            squares.setdefault(shot_id, []).append(value * value)
        return {shot_id: float(np.sqrt(np.mean(values))) for shot_id, values in squares.items()}

    def summary(self) -> dict:
        return {
            'frames': len(self),
            'rmse_mm': self.pooled(),
            'mean_frame_rmse_mm': float(np.mean(self.values)) if len(self) else 0.0,
            'max_frame_rmse_mm': float(np.max(self.values)) if len(self) else 0.0,
            'per_shot_rmse_mm': {str(shot): value for shot, value in self.per_shot().items()},
        }


def vertex_rmse(prediction: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None,
                identifiers: Optional[Sequence[Tuple[int, int]]] = None) -> RmseSeries:
    """
    Per frame: sqrt(mean over masked vertices of the squared Euclidean distance), in mm
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape or prediction.ndim != 3 or prediction.shape[2] != 3:
        raise DimensionError(f'Predictions {prediction.shape} and targets {target.shape} '
                             f'must both be N x V x 3')
    mask = np.ones(prediction.shape[1], dtype=bool) if mask is None \
        else np.asarray(mask, dtype=bool)
    if mask.shape != (prediction.shape[1],):
        raise DimensionError(f'Mask length {mask.shape} does not match {prediction.shape[1]} vertices')
    if not mask.any():
        raise ParameterError('Vertex mask selects no vertices')

    squared = np.sum(np.square(prediction[:, mask] - target[:, mask]), axis=2)
    values = CM_TO_MM * np.sqrt(np.mean(squared, axis=1))
    if identifiers is None:
        identifiers = [(0, index) for index in range(len(values))]
    return RmseSeries(values=values, identifiers=list(identifiers))


def mse_to_rmse_mm(mse: float) -> float:
    """
    Per-coordinate MSE in cm^2 to per-vertex Euclidean RMSE in mm
    """
    if mse < 0:
        raise ParameterError(f'MSE must be non-negative, received {mse}')
    return CM_TO_MM * float(np.sqrt(3.0 * mse))


def _open_for_writing(path: Union[str, Path]):
    try:
        return open(path, 'w', encoding='utf-8', newline='')
    except OSError as error:
        raise ExportError(f'{path}: cannot write ({error})') from error


def export_csv(series: RmseSeries, path: Union[str, Path]) -> None:
    """
    shot, frame, rmse_mm; one row per frame in dataset order
    """
    with _open_for_writing(path) as file:
        writer = csv.writer(file)
        writer.writerow(['shot', 'frame', 'rmse_mm'])
        for (shot_id, frame_index), value in zip(series.identifiers, series.values):
            writer.writerow([shot_id, frame_index, f'{value:.6g}'])


def export_loss_curve(history: Sequence[dict], path: Union[str, Path]) -> None:
    """
    epoch, train_loss, val_loss; one row per completed epoch
    """
    with _open_for_writing(path) as file:
        writer = csv.writer(file)
        writer.writerow(['epoch', 'train_loss', 'val_loss'])
        for entry in history:
            writer.writerow([entry['epoch'], f'{entry["train_loss"]:.6g}',
                             f'{entry["val_loss"]:.6g}'])


def basis_drift(initial_basis: PcaBasis, output_weight: np.ndarray) -> float:
    """
    Mean cosine of the principal angles between the trained output layer's
    column space and the initial PCA span; 1 means the span did not move
    """
    initial = np.asarray(initial_basis.components, dtype=np.float64).T
    trained, _ = np.linalg.qr(np.asarray(output_weight, dtype=np.float64))
    if initial.shape != trained.shape:
        raise DimensionError(f'Output weight {np.shape(output_weight)} does not match '
                             f'basis {initial.shape}')
    cosines = np.linalg.svd(initial.T @ trained, compute_uv=False)
    return float(np.mean(np.clip(cosines, 0.0, 1.0)))


@dataclass
class ThroughputReport:
    """
    Frames per second of eval-mode forward passes, online and batched
    """
    online_fps: float
    batched_fps: float
    batch_size: int
    frame_count: int
    online_seconds: float
    batched_seconds: float
    max_batch_difference: float
    end_to_end_online_fps: Optional[float] = None
    end_to_end_batched_fps: Optional[float] = None
    parallelism: dict = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.batched_fps / self.online_fps

    def to_dict(self) -> dict:
        values = asdict(self)
        values['speedup'] = self.speedup
        return values

    def save(self, path: Union[str, Path]) -> None:
        try:
            with open(path, 'w', encoding='utf-8') as file:
                json.dump(self.to_dict(), file, indent=4, separators=(',', ': '))
        except OSError as error:
            raise ExportError(f'{path}: cannot write ({error})') from error


def _parallelism() -> dict:
    info = {'cpu_count': os.cpu_count(), 'python': platform.python_version(),
            'numpy': np.__version__}
    info.update({name: os.environ.get(name) for name in THREAD_VARIABLES})
    return info


def _timed_pass(run, frames: int, batch_size: int, warmup: int) -> Tuple[float, List[np.ndarray]]:
    for _ in range(warmup):
        run(0, batch_size)
    outputs = []
    started = time.perf_counter()
    for start in range(0, frames, batch_size):
        outputs.append(run(start, batch_size))
    return time.perf_counter() - started, outputs


def benchmark_throughput(checkpoint: Checkpoint, images: np.ndarray,
                         batch_sizes: Sequence[int] = BENCHMARK_BATCH_SIZES,
                         warmup: int = 2, end_to_end: bool = False) -> ThroughputReport:
    """
    Times forward passes over preprocessed frames at batch 1 and at the large
    batch size. Encoding (whitening or input projection) is excluded unless
    end_to_end is set, in which case it is timed separately
    """
    online_size, batch_size = batch_sizes
    images = np.asarray(images)
    frames = len(images)
    if frames < batch_size:
        raise ParameterError(f'Benchmark needs at least {batch_size} frames, received {frames}')

    encoded = checkpoint.encoder.encode(images)

    def forward(start: int, size: int) -> np.ndarray:
        return forward_batch(checkpoint.params, checkpoint.spec, encoded[start:start + size],
                             mode='eval').data

    def forward_end_to_end(start: int, size: int) -> np.ndarray:
        batch = checkpoint.encoder.encode(images[start:start + size])
        return forward_batch(checkpoint.params, checkpoint.spec, batch, mode='eval').data

    online_seconds, online_outputs = _timed_pass(forward, frames, online_size, warmup)
    batched_seconds, batched_outputs = _timed_pass(forward, frames, batch_size, warmup)
    difference = float(np.max(np.abs(np.concatenate(online_outputs)
                                     - np.concatenate(batched_outputs))))

    report = ThroughputReport(online_fps=frames / online_seconds,
                              batched_fps=frames / batched_seconds, batch_size=batch_size,
                              frame_count=frames, online_seconds=online_seconds,
                              batched_seconds=batched_seconds, max_batch_difference=difference,
                              parallelism=_parallelism())
    if end_to_end:
        seconds, _ = _timed_pass(forward_end_to_end, frames, online_size, warmup)
        report.end_to_end_online_fps = frames / seconds
        seconds, _ = _timed_pass(forward_end_to_end, frames, batch_size, warmup)
        report.end_to_end_batched_fps = frames / seconds

    logger.info('Throughput over {} frames: {:.1f} fps online, {:.1f} fps at batch {} '
                '({:.2f}x), max difference {:.2e}', frames, report.online_fps,
                report.batched_fps, batch_size, report.speedup, difference)
    return report


class EvaluationPipeline:
    """
    Predicts every frame of a dataset with a checkpoint and scores the result
    """

    def __init__(self, checkpoint: Checkpoint, dataset: FrameDataset):
        self.checkpoint = checkpoint
        self.dataset = dataset

    def predictions(self) -> np.ndarray:
        images = source_images(self.dataset, self.checkpoint.spec.kind)
        return predict(self.checkpoint.params, self.checkpoint.spec, self.checkpoint.encoder,
                       images)

    def run(self, output_path: Optional[Union[str, Path]] = None) -> dict:
        series = vertex_rmse(self.predictions(), self.dataset.targets(), self.dataset.mask,
                             self.dataset.identifiers())
        summary = series.summary()
        if self.checkpoint.output_basis is not None:
            summary['basis_drift'] = basis_drift(self.checkpoint.output_basis,
                                                 self.checkpoint.params['output.weight'])
        if output_path is not None:
            output_path = Path(output_path)
            output_path.mkdir(parents=True, exist_ok=True)
            export_csv(series, output_path / 'rmse.csv')
            plot_rmse_series(series, output_path / 'rmse.png')
            with open(output_path / 'summary.json', 'w', encoding='utf-8') as file:
                json.dump(summary, file, indent=4, separators=(',', ': '))
        logger.info('RMSE over {} frames: {:.4f} mm', summary['frames'], summary['rmse_mm'])
        return summary
