"""
Training loop: Adam with learning-rate and beta1 ramps, minibatching,
augmentation, validation, checkpointing and resume
"""
import json
import math
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from constants import (DATASET_PATH, INPUT_PCA_COMPONENTS, PENULTIMATE_WIDTH, RUNS_PATH,
                       TRAIN_CONFIG_PATH)
from core_utils.augment import AugmentConfig, apply, sample_params, sample_seed, strength_at
from core_utils.autodiff import DEFAULT_DTYPE, Tensor, backward, mse_loss
from core_utils.errors import NumericError, ParameterError
from core_utils.frame import FrameDataset
from core_utils.pca import PcaBasis, complete_basis, fit_pca, fit_whitening
from core_utils.seeding import BASIS_STREAM, DROPOUT_STREAM, PERMUTATION_STREAM, derive_seed
from core_utils.visualizer import plot_loss_curve
from dataset import source_images, split
from evaluation import export_loss_curve, mse_to_rmse_mm
from model import (Checkpoint, InputEncoder, ModelSpec, Parameters, build, forward_batch,
                   initialize, save_checkpoint)

CHECKPOINT_NAME = 'model.fcap'
LAST_GOOD_NAME = 'last_good.fcap'
REPORT_NAME = 'train_report.json'
LOSS_CSV_NAME = 'loss.csv'
LOSS_CHART_NAME = 'loss.png'


class IncorrectTrainConfigError(ParameterError):
    """
    Training configuration violates its invariants
    """


class NonFiniteGradientError(NumericError):
    """
    A gradient contains NaN or infinity
    """


class TrainingDivergedError(NumericError):
    """
    Loss or gradients became non-finite; the last good checkpoint is kept
    """

    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    """
    Every training hyperparameter
    """
    model: str = 'conv'
    epochs: int = 200
    rampdown_epochs: int = 30
    minibatch: int = 50
    base_lr: float = 1e-3
    rampup_start_factor: float = 0.01
    beta1_start: float = 0.9
    beta1_end: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    augmentation: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    validation_fraction: float = 0.1
    train_output_layer: bool = True
    fc_jitter: bool = False
    width_divisor: int = 1
    input_components: int = INPUT_PCA_COMPONENTS
    checkpoint_every_epoch: bool = False
    workers: int = 2
    prefetch: int = 2

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        if self.model not in ('conv', 'fc'):
            raise IncorrectTrainConfigError(f'Unknown model kind: {self.model}')
        if self.epochs < 1:
            raise IncorrectTrainConfigError('epochs must be at least 1')
        if not 0 <= self.rampdown_epochs < self.epochs:
            raise IncorrectTrainConfigError(f'rampdown_epochs must be in [0, {self.epochs})')
        if self.minibatch < 1:
            raise IncorrectTrainConfigError('minibatch must be at least 1')
        if self.base_lr < 0 or not 0 < self.rampup_start_factor <= 1:
            raise IncorrectTrainConfigError('base_lr must be non-negative and '
                                            'rampup_start_factor in (0, 1]')
        if not 0 <= self.beta1_end <= self.beta1_start < 1 or not 0 <= self.beta2 < 1:
            raise IncorrectTrainConfigError('Adam betas must satisfy 0 <= end <= start < 1')
        if self.epsilon <= 0:
            raise IncorrectTrainConfigError('epsilon must be positive')
        if not 0 < self.validation_fraction < 1:
            raise IncorrectTrainConfigError('validation_fraction must be in (0, 1)')
        if self.width_divisor < 1 or self.input_components < 1:
            raise IncorrectTrainConfigError('width_divisor and input_components must be positive')
        if self.workers < 1 or self.prefetch < 1:
            raise IncorrectTrainConfigError('workers and prefetch must be at least 1')

    @classmethod
    def from_dict(cls, values: dict) -> 'TrainConfig':
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise IncorrectTrainConfigError(f'Unknown training keys: {sorted(unknown)}')
        return cls(**values)

    def to_dict(self) -> dict:
        values = asdict(self)
        values['augment'] = self.augment.to_dict()
        return values


def validate_train_config(config_path: Union[str, Path] = TRAIN_CONFIG_PATH) -> TrainConfig:
    """
    Reads and validates a training config
    """
    try:
        with open(config_path, encoding='utf-8') as file:
            values = json.load(file)
    except (OSError, json.JSONDecodeError) as error:
        raise IncorrectTrainConfigError(f'{config_path}: cannot read config ({error})') from error
    if not isinstance(values, dict):
        raise IncorrectTrainConfigError(f'{config_path}: config must be a JSON object')
    try:
        return TrainConfig.from_dict(values)
    except TypeError as error:
        raise IncorrectTrainConfigError(f'{config_path}: {error}') from error


@dataclass(frozen=True)
class ScheduleState:
    """
    Optimizer and augmentation settings of one step
    """
    step: int
    epoch: int
    lr: float
    beta1: float
    strength: float


def schedule_at(step: int, steps_per_epoch: int, config: TrainConfig) -> ScheduleState:
    """
    Geometric ramp-up over epoch 0, base_lr / sqrt(epoch) afterwards, and a
    raised-cosine ramp-down of lr and beta1 over the last rampdown_epochs
    """
    if step < 0:
        raise ParameterError(f'Step must be non-negative, received {step}')
    if steps_per_epoch < 1:
        raise ParameterError(f'steps_per_epoch must be at least 1, received {steps_per_epoch}')

    epoch, position = divmod(step, steps_per_epoch)
    if epoch == 0:
        exponent = 1.0 if steps_per_epoch == 1 else 1.0 - position / (steps_per_epoch - 1)
        lr = config.base_lr * config.rampup_start_factor ** exponent
    else:
        lr = config.base_lr / math.sqrt(epoch)

    beta1 = config.beta1_start
    rampdown_start_epoch = config.epochs - config.rampdown_epochs
    if config.rampdown_epochs > 0 and epoch >= rampdown_start_epoch:
        start = rampdown_start_epoch * steps_per_epoch
        span = config.epochs * steps_per_epoch - 1 - start
        progress = min(1.0, (step - start) / span) if span > 0 else 1.0
        weight = (1.0 + math.cos(math.pi * progress)) / 2.0
        lr *= weight
        beta1 = config.beta1_end + (config.beta1_start - config.beta1_end) * weight

    strength = strength_at(step, steps_per_epoch) if config.augmentation else 0.0
    return ScheduleState(step=step, epoch=epoch, lr=lr, beta1=beta1, strength=strength)


@dataclass
class AdamState:
    """
    First and second moment accumulators and the step counter
    """
    t: int = 0
    first: Parameters = field(default_factory=dict)
    second: Parameters = field(default_factory=dict)


def adam_step(params: Parameters, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float, beta2: float = 0.999, epsilon: float = 1e-8) -> Parameters:
    """
    One bias-corrected Adam update. Parameters without a gradient are returned unchanged;
    moments are updated even when lr is zero
    """
    if lr < 0:
        raise ParameterError(f'Learning rate must be non-negative, received {lr}')
    for name, grad in grads.items():
        if name not in params or grad.shape != params[name].shape:
            raise ParameterError(f'Gradient {name} does not match any parameter')
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f'Gradient of {name} is not finite '
                                         f'(max |g| {np.nanmax(np.abs(grad))})')

    state.t += 1
    first_correction = 1.0 - beta1 ** state.t
    second_correction = 1.0 - beta2 ** state.t
    updated = dict(params)
    for name, grad in grads.items():
        value = params[name]
        first = state.first.get(name, np.zeros_like(value))
        second = state.second.get(name, np.zeros_like(value))
        first = (beta1 * first + (1.0 - beta1) * grad).astype(value.dtype)
        second = (beta2 * second + (1.0 - beta2) * grad * grad).astype(value.dtype)
        state.first[name] = first
        state.second[name] = second
        step = lr * (first / first_correction) / (np.sqrt(second / second_correction) + epsilon)
        updated[name] = (value - step).astype(value.dtype)
    return updated


@dataclass
class SplitData:
    """
    Source images (stabilized for the fully connected network) and flattened targets
    """
    images: np.ndarray
    targets: np.ndarray
    identifiers: List[Tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def split_data(dataset: FrameDataset, kind: str) -> SplitData:
    return SplitData(images=source_images(dataset, kind),
                     targets=dataset.targets().reshape(len(dataset), -1),
                     identifiers=dataset.identifiers())


Task = Tuple[np.ndarray, int, float]


class BatchBuilder:
    """
    Turns frame indices into encoded minibatches. Augmentation only runs when
    the builder is a training builder; each sample's draw depends on
    (seed, epoch, frame index) alone
    """

    def __init__(self, data: SplitData, encoder: InputEncoder, config: TrainConfig,
                 training: bool):
        self.data = data
        self.encoder = encoder
        self.config = config
        self.training = training
        self.augmented_count = 0
        self._count_lock = threading.Lock()

    def _augment(self, image: np.ndarray, index: int, epoch: int, strength: float) -> np.ndarray:
        params = sample_params(sample_seed(self.config.seed, epoch, int(index)),
                               self.config.augment, strength, image.shape)
        if self.encoder.kind == 'fc' and not self.config.fc_jitter:
            params = replace(params, tx=0.0, ty=0.0, angle=0.0, zoom=1.0)
        with self._count_lock:
            self.augmented_count += 1
        return apply(image, params, self.config.augment)

    def build(self, indices: Sequence[int], epoch: int = 0,
              strength: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        images = self.data.images[indices]
        if self.training and strength > 0:
            images = np.stack([self._augment(image, index, epoch, strength)
                               for image, index in zip(images, indices)])
        return self.encoder.encode(images), self.data.targets[indices]

    def batches(self, tasks: Sequence[Task]) \
            -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """
        Builds batches in worker threads, at most `prefetch` ahead, yielding them in task order
        """
        with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
            pending = deque()
            for task in tasks:
                pending.append(executor.submit(self.build, *task))
                if len(pending) > self.config.prefetch:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()


def evaluate_loss(params: Parameters, spec: ModelSpec, builder: BatchBuilder,
                  batch_size: int = 200) -> float:
    """
    Eval-mode MSE over every frame of a split, without augmentation or dropout
    """
    count = len(builder.data)
    total = 0.0
    tasks = [(np.arange(start, min(start + batch_size, count)), 0, 0.0)
             for start in range(0, count, batch_size)]
    for inputs, targets in builder.batches(tasks):
        prediction = forward_batch(params, spec, inputs, mode='eval')
        total += mse_loss(prediction, Tensor(targets, dtype=DEFAULT_DTYPE)).item() * len(inputs)
    return total / max(count, 1)


@dataclass
class TrainReport:
    """
    Per-epoch losses and schedule values, timing and produced files
    """
    history: List[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoints: List[str] = field(default_factory=list)
    validation_target_variance: float = 0.0

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]['train_loss'] if self.history else float('nan')

    @property
    def final_val_loss(self) -> float:
        return self.history[-1]['val_loss'] if self.history else float('nan')

    def to_dict(self) -> dict:
        values = asdict(self)
        values['final_train_loss'] = self.final_train_loss
        values['final_val_loss'] = self.final_val_loss
        values['final_val_rmse_mm'] = mse_to_rmse_mm(self.final_val_loss) \
            if self.history else None
        return values

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w', encoding='utf-8') as file:
            json.dump(self.to_dict(), file, indent=4, ensure_ascii=False, separators=(',', ': '))


@dataclass
class TrainingSetup:
    """
    Everything fitted on the train split before the first epoch
    """
    spec: ModelSpec
    params: Parameters
    encoder: InputEncoder
    output_basis: PcaBasis
    train_data: SplitData
    validation_data: SplitData


def prepare_training(dataset: FrameDataset, config: TrainConfig) -> TrainingSetup:
    """
    Splits by shot, fits whitening or the input PCA and the output PCA on the
    train split only, then builds and initializes the network
    """
    minimum_vertices = -(-PENULTIMATE_WIDTH // 3)
    if dataset.vertex_count < minimum_vertices:
        raise ParameterError(f'Training needs at least {minimum_vertices} vertices to fill the '
                             f'{PENULTIMATE_WIDTH}-wide output basis, dataset has '
                             f'{dataset.vertex_count}')
    train_set, validation_set = split(dataset, config.validation_fraction, config.seed)
    train_data = split_data(train_set, config.model)
    validation_data = split_data(validation_set, config.model)

    output_basis = complete_basis(fit_pca(train_data.targets, n_components=PENULTIMATE_WIDTH),
                                  PENULTIMATE_WIDTH, derive_seed(config.seed, BASIS_STREAM))
    if config.model == 'conv':
        encoder = InputEncoder(kind='conv', whitening=fit_whitening(train_data.images))
        spec = build('conv', dataset.vertex_count * 3,
                     input_shape=(1,) + tuple(dataset.image_shape),
                     width_divisor=config.width_divisor)
    else:
        flat = train_data.images.reshape(len(train_data), -1)
        input_basis = fit_pca(flat, n_components=config.input_components)
        encoder = InputEncoder(kind='fc', input_basis=input_basis)
        spec = build('fc', dataset.vertex_count * 3, n_in=input_basis.k,
                     width_divisor=config.width_divisor)

    params = initialize(spec, config.seed, output_basis)
    return TrainingSetup(spec=spec, params=params, encoder=encoder, output_basis=output_basis,
                         train_data=train_data, validation_data=validation_data)


def _checkpoint(setup: TrainingSetup, params: Parameters, adam: AdamState, config: TrainConfig,
                step: int, epoch: int, history: List[dict]) -> Checkpoint:
    return Checkpoint(spec=setup.spec, params=dict(params), encoder=setup.encoder,
                      output_basis=setup.output_basis, step=step, epoch=epoch, seed=config.seed,
                      adam_step=adam.t, adam_first=dict(adam.first),
                      adam_second=dict(adam.second),
                      meta={'config': config.to_dict(), 'history': list(history)})


def _diverged(message: str, snapshot: Checkpoint,
              run_path: Optional[Path]) -> TrainingDivergedError:
    path = None
    if run_path is not None:
        path = run_path / LAST_GOOD_NAME
        save_checkpoint(path, snapshot)
    logger.error('{}; last good state is from epoch {}', message, snapshot.epoch)
    return TrainingDivergedError(message, path)


def epoch_tasks(epoch: int, frame_count: int, config: TrainConfig) \
        -> Tuple[List[ScheduleState], List[Task]]:
    """
    Schedules and minibatch tasks of one epoch: a seed-derived permutation of
    all training frames cut into consecutive minibatches
    """
    steps_per_epoch = math.ceil(frame_count / config.minibatch)
    order = np.random.default_rng(derive_seed(config.seed, PERMUTATION_STREAM, epoch)) \
        .permutation(frame_count)
    schedules = [schedule_at(epoch * steps_per_epoch + index, steps_per_epoch, config)
                 for index in range(steps_per_epoch)]
    tasks = [(order[index * config.minibatch:(index + 1) * config.minibatch], epoch,
              schedule.strength) for index, schedule in enumerate(schedules)]
    return schedules, tasks


def train(setup: TrainingSetup, config: TrainConfig, run_path: Optional[Union[str, Path]] = None,
          resume: Optional[Checkpoint] = None) -> TrainReport:
    """
    Runs the epochs. Every training frame is visited once per epoch in a
    seed-derived order; validation runs on the full validation split after each epoch
    """
    run_path = Path(run_path) if run_path is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    frame_count = len(setup.train_data)
    if frame_count == 0 or len(setup.validation_data) == 0:
        raise ParameterError('Training needs non-empty train and validation splits')
    steps_per_epoch = math.ceil(frame_count / config.minibatch)
    train_builder = BatchBuilder(setup.train_data, setup.encoder, config, training=True)
    validation_builder = BatchBuilder(setup.validation_data, setup.encoder, config, training=False)

    params = dict(setup.params)
    adam = AdamState()
    history: List[dict] = []
    first_epoch = 0
    if resume is not None:
        params = {name: value.astype(DEFAULT_DTYPE) for name, value in resume.params.items()}
        adam = AdamState(t=resume.adam_step, first=dict(resume.adam_first),
                         second=dict(resume.adam_second))
        history = list(resume.meta.get('history', []))
        first_epoch = resume.epoch
        logger.warning('Resuming from epoch {} (step {})', resume.epoch, resume.step)

    def trainable(name: str) -> bool:
        return config.train_output_layer or not name.startswith('output.')

    validation_targets = setup.validation_data.targets.astype(np.float64)
    report = TrainReport(history=history, validation_target_variance=float(
        np.mean((validation_targets - validation_targets.mean(axis=0)) ** 2)))
    snapshot = _checkpoint(setup, params, adam, config, first_epoch * steps_per_epoch,
                           first_epoch, history)

    for epoch in range(first_epoch, config.epochs):
        epoch_started = time.perf_counter()
        schedules, tasks = epoch_tasks(epoch, frame_count, config)

        total_loss = 0.0
        batches = train_builder.batches(tasks)
        for schedule, (inputs, targets) in tqdm(zip(schedules, batches), total=steps_per_epoch,
                                                desc=f'Epoch {epoch}', leave=False):
            tensors = {name: Tensor(value, requires_grad=trainable(name), copy=False)
                       for name, value in params.items()}
            prediction = forward_batch(tensors, setup.spec, inputs, mode='train',
                                       seed=derive_seed(config.seed, DROPOUT_STREAM, schedule.step))
            loss = mse_loss(prediction, Tensor(targets, dtype=DEFAULT_DTYPE))
            if not np.isfinite(loss.item()):
                raise _diverged(f'Loss became {loss.item()} at step {schedule.step}',
                                snapshot, run_path)

            backward(loss)
            grads = {name: tensor.grad for name, tensor in tensors.items()
                     if tensor.requires_grad and tensor.grad is not None}
            try:
                params = adam_step(params, grads, adam, schedule.lr, schedule.beta1,
                                   config.beta2, config.epsilon)
            except NonFiniteGradientError as error:
                raise _diverged(f'{error} at step {schedule.step}', snapshot, run_path) from error
            total_loss += loss.item() * len(inputs)
            logger.debug('step {} loss {:.6g} lr {:.3g} beta1 {:.3f}', schedule.step,
                         loss.item(), schedule.lr, schedule.beta1)

        validation_loss = evaluate_loss(params, setup.spec, validation_builder)
        if not np.isfinite(validation_loss):
            raise _diverged(f'Validation loss became {validation_loss} in epoch {epoch}',
                            snapshot, run_path)
        last = schedules[-1]
        history.append({
            'epoch': epoch,
            'train_loss': total_loss / frame_count,
            'val_loss': validation_loss,
            'lr': last.lr,
            'beta1': last.beta1,
            'strength': last.strength,
            'seconds': time.perf_counter() - epoch_started,
        })
        logger.info('epoch {:4d} | train {:.6g} | val {:.6g} | lr {:.3g} | beta1 {:.3f} | '
                    'strength {:.2f}', epoch, history[-1]['train_loss'], validation_loss,
                    last.lr, last.beta1, last.strength)

        snapshot = _checkpoint(setup, params, adam, config, (epoch + 1) * steps_per_epoch,
                               epoch + 1, history)
        if run_path is not None and config.checkpoint_every_epoch:
            path = run_path / f'epoch{epoch + 1:04d}.fcap'
            save_checkpoint(path, snapshot)
            report.checkpoints.append(str(path))

    setup.params = params
    report.history = history
    report.wall_time = time.perf_counter() - started
    if run_path is not None:
        save_checkpoint(run_path / CHECKPOINT_NAME, snapshot)
        report.checkpoints.append(str(run_path / CHECKPOINT_NAME))
        export_loss_curve(history, run_path / LOSS_CSV_NAME)
        plot_loss_curve(history, run_path / LOSS_CHART_NAME)
        report.save(run_path / REPORT_NAME)
    return report


def setup_from_checkpoint(checkpoint: Checkpoint, dataset: FrameDataset,
                          config: TrainConfig) -> TrainingSetup:
    """
    Rebuilds the split and the frozen input and output transforms of a resumed run
    """
    train_set, validation_set = split(dataset, config.validation_fraction, config.seed)
    return TrainingSetup(spec=checkpoint.spec, params=dict(checkpoint.params),
                         encoder=checkpoint.encoder, output_basis=checkpoint.output_basis,
                         train_data=split_data(train_set, checkpoint.spec.kind),
                         validation_data=split_data(validation_set, checkpoint.spec.kind))


def main(config_path: Union[str, Path] = TRAIN_CONFIG_PATH,
         dataset_path: Union[str, Path] = DATASET_PATH,
         run_path: Union[str, Path] = RUNS_PATH) -> TrainReport:
    config = validate_train_config(config_path)
    dataset = FrameDataset.load(dataset_path)
    return train(prepare_training(dataset, config), config, run_path)


if __name__ == '__main__':
    main()
