"""
Visualizer module for convergence curves and per-frame RMSE series
"""

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position


def plot_loss_curve(history: Sequence[dict], path_to_save: Path) -> None:
    """
    param: history is a list of per-epoch dictionaries with keys epoch, train_loss, val_loss
    """
    epochs = [entry['epoch'] for entry in history]

    figure = plt.figure()
    axis = figure.add_subplot(1, 1, 1)
    axis.plot(epochs, [entry['train_loss'] for entry in history], color='b', label='Training')
    axis.plot(epochs, [entry['val_loss'] for entry in history], color='r', label='Validation')
    axis.set_yscale('log')
    axis.set_xlabel('Epoch')
    axis.set_ylabel('Loss (cm²)')
    axis.legend()

    figure.savefig(path_to_save)
    plt.close(figure)


def plot_rmse_series(series, path_to_save: Path) -> None:
    """
    One line per shot of per-frame RMSE in millimeters
    """
    colors = ('b', 'g', 'r', 'c')
    by_shot = {}
    for (shot_id, frame_index), value in zip(series.identifiers, series.values):
        by_shot.setdefault(shot_id, []).append((frame_index, value))

    figure = plt.figure()
    axis = figure.add_subplot(1, 1, 1)
    for number, (shot_id, points) in enumerate(by_shot.items()):
        frames, values = np.array(points).T
        axis.plot(frames, values, color=colors[number % len(colors)], label=f'shot {shot_id}')
    axis.set_xlabel('Frame')
    axis.set_ylabel('RMSE (mm)')
    if by_shot:
        axis.set_ylim(0, max(series.values) * 1.1 + 1e-9)
        axis.legend()

    figure.savefig(path_to_save)
    plt.close(figure)
