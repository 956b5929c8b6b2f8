"""
Tests for minibatch building and the training loop
"""
import copy
import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from config.stage_1_autodiff_tests.s1_1_tensor_ops_test import ExtendedTestCase
from config.stage_4_dataset_tests.dataset_generator import clean_test_path, generate_test_dataset
from config.test_params import TEST_RUN_PATH, TEST_TRAIN_PARAMS
from core_utils.augment import AugmentConfig
from core_utils.errors import ParameterError
from model import load_checkpoint, predict
from trainer import (CHECKPOINT_NAME, LAST_GOOD_NAME, LOSS_CHART_NAME, LOSS_CSV_NAME, REPORT_NAME,
                     BatchBuilder, TrainConfig, TrainingDivergedError, epoch_tasks, evaluate_loss,
                     prepare_training, setup_from_checkpoint, train)


print("Stage 6B: Validating Training Loop")
print("Starting tests for minibatches, epochs and resume")


def _losses(history):
    return [(entry['epoch'], entry['train_loss'], entry['val_loss']) for entry in history]


class BatchBuilderCheck(ExtendedTestCase):
    """
    Encoded minibatches with per-sample augmentation
    """

    @classmethod
    def setUpClass(cls) -> None:
        cls.dataset = generate_test_dataset()
        cls.config = TrainConfig(**TEST_TRAIN_PARAMS)
        cls.setup = prepare_training(cls.dataset, cls.config)

    @pytest.mark.stage_6_trainer_checks
    def test_split_sizes(self):
        """
        Ensure one 40-frame shot is held out and the rest is for training
        """
        self.assertEqual(200, len(self.setup.train_data))
        self.assertEqual(40, len(self.setup.validation_data))
        self.assertEqual((200, 180), self.setup.train_data.targets.shape)
        self.assertEqual(160, self.setup.output_basis.k)

    @pytest.mark.stage_6_trainer_checks
    def test_augmentation_is_reproducible(self):
        """
        Ensure a batch depends only on (seed, epoch, frame index)
        """
        builder = BatchBuilder(self.setup.train_data, self.setup.encoder, self.config,
                               training=True)
        indices = np.array([3, 17, 42])
        first, targets = builder.build(indices, epoch=2, strength=1.0)
        again, _ = builder.build(indices, epoch=2, strength=1.0)
        other, _ = builder.build(indices, epoch=3, strength=1.0)
        plain, _ = builder.build(indices, epoch=2, strength=0.0)

        np.testing.assert_array_equal(first, again)
        self.assertFalse(np.array_equal(first, other))
        self.assertFalse(np.array_equal(first, plain))
        np.testing.assert_array_equal(targets, self.setup.train_data.targets[indices])
        self.assertEqual(9, builder.augmented_count)

    @pytest.mark.stage_6_trainer_checks
    def test_validation_is_never_augmented(self):
        """
        Ensure validation batches are built from unmodified frames
        """
        builder = BatchBuilder(self.setup.validation_data, self.setup.encoder, self.config,
                               training=False)
        inputs, _ = builder.build(np.arange(5), epoch=7, strength=1.0)
        expected = self.setup.encoder.encode(self.setup.validation_data.images[:5])
        np.testing.assert_array_equal(expected, inputs)
        evaluate_loss(self.setup.params, self.setup.spec, builder)
        self.assertEqual(0, builder.augmented_count)

    @pytest.mark.stage_6_trainer_checks
    def test_prefetch_keeps_task_order(self):
        """
        Ensure batches built in worker threads arrive in task order
        """
        builder = BatchBuilder(self.setup.train_data, self.setup.encoder, self.config,
                               training=True)
        tasks = [(np.arange(start, start + 10), 1, 0.5) for start in range(0, 100, 10)]
        for task, (inputs, targets) in zip(tasks, builder.batches(tasks)):
            expected_inputs, expected_targets = builder.build(*task)
            np.testing.assert_array_equal(expected_inputs, inputs)
            np.testing.assert_array_equal(expected_targets, targets)

    @pytest.mark.stage_6_trainer_checks
    def test_evaluate_loss_matches_direct_mse(self):
        """
        Ensure the validation loss is the per-coordinate MSE over every frame
        """
        builder = BatchBuilder(self.setup.validation_data, self.setup.encoder, self.config,
                               training=False)
        loss = evaluate_loss(self.setup.params, self.setup.spec, builder, batch_size=15)
        prediction = predict(self.setup.params, self.setup.spec, self.setup.encoder,
                             self.setup.validation_data.images).reshape(40, -1)
        expected = float(np.mean((prediction - self.setup.validation_data.targets) ** 2))
        self.assertAlmostEqual(expected, loss, delta=1e-5 * max(expected, 1.0))

    @pytest.mark.stage_6_trainer_checks
    def test_every_frame_once_per_epoch(self):
        """
        Ensure the minibatches of an epoch cover every training frame exactly once
        """
        config = replace(self.config, minibatch=30)
        for epoch in (0, 1, 3):
            schedules, tasks = epoch_tasks(epoch, 200, config)
            self.assertEqual(7, len(schedules))
            self.assertEqual(len(schedules), len(tasks))
            visited = np.concatenate([indices for indices, _, _ in tasks])
            self.assertEqual(list(range(200)), sorted(visited.tolist()))
            self.assertTrue(all(task_epoch == epoch for _, task_epoch, _ in tasks))
        first = np.concatenate([task[0] for task in epoch_tasks(0, 200, config)[1]])
        second = np.concatenate([task[0] for task in epoch_tasks(1, 200, config)[1]])
        self.assertFalse(np.array_equal(first, second))

    @pytest.mark.stage_6_trainer_checks
    def test_validation_loss_ignores_augment_config(self):
        """
        Ensure validation gives one loss under a mild and a strong augmentation config
        """
        strong = replace(self.config, augment=AugmentConfig(max_translate=0.2, max_rotate=30.0,
                                                            max_brightness=0.5, noise_std=0.1))
        losses = []
        for config in (self.config, strong):
            builder = BatchBuilder(self.setup.validation_data, self.setup.encoder, config,
                                   training=False)
            losses.append(evaluate_loss(self.setup.params, self.setup.spec, builder))
        self.assertEqual(losses[0], losses[1])

    @pytest.mark.stage_6_trainer_checks
    def test_augment_count_across_workers(self):
        """
        Ensure every augmented sample is counted when batches are built in parallel
        """
        config = replace(self.config, workers=4)
        builder = BatchBuilder(self.setup.train_data, self.setup.encoder, config, training=True)
        tasks = [(np.arange(start, start + 25), 0, 1.0) for start in range(0, 200, 25)]
        for _ in builder.batches(tasks):
            pass
        self.assertEqual(200, builder.augmented_count)


class TrainingRunCheck(ExtendedTestCase):
    """
    Short runs of the full loop on the small corpus
    """

    @classmethod
    def setUpClass(cls) -> None:
        cls.dataset = generate_test_dataset()

    def tearDown(self) -> None:
        clean_test_path()

    def _config(self, **overrides) -> TrainConfig:
        params = dict(TEST_TRAIN_PARAMS)
        params.update(overrides)
        return TrainConfig(**params)

    @pytest.mark.stage_6_trainer_checks
    def test_run_writes_artifacts(self):
        """
        Ensure a run leaves a checkpoint, the loss table, the chart and the report
        """
        config = self._config()
        report = train(prepare_training(self.dataset, config), config, TEST_RUN_PATH)

        for name in (CHECKPOINT_NAME, LOSS_CSV_NAME, LOSS_CHART_NAME, REPORT_NAME):
            self.assertTrue((TEST_RUN_PATH / name).exists(), f'{name} is missing')
        self.assertFalse((TEST_RUN_PATH / LAST_GOOD_NAME).exists())

        with (TEST_RUN_PATH / LOSS_CSV_NAME).open(encoding='utf-8') as file:
            rows = list(csv.reader(file))
        self.assertEqual(['epoch', 'train_loss', 'val_loss'], rows[0])
        self.assertEqual(config.epochs + 1, len(rows))

        with (TEST_RUN_PATH / REPORT_NAME).open(encoding='utf-8') as file:
            saved = json.load(file)
        self.assertEqual(config.epochs, len(saved['history']))
        self.assertTrue(np.isfinite(saved['final_val_loss']))
        self.assertGreater(saved['final_val_rmse_mm'], 0.0)

        checkpoint = load_checkpoint(TEST_RUN_PATH / CHECKPOINT_NAME)
        self.assertEqual(config.epochs, checkpoint.epoch)
        self.assertEqual(config.epochs * 4, checkpoint.step)
        self.assertEqual(checkpoint.step, checkpoint.adam_step)
        self.assertEqual(0.0, report.history[-1]['lr'])
        self.assertEqual(0.5, report.history[-1]['beta1'])

    @pytest.mark.stage_6_trainer_checks
    def test_same_seed_same_run(self):
        """
        Ensure two runs with one seed produce the same losses and weights
        """
        config = self._config()
        first_setup = prepare_training(self.dataset, config)
        second_setup = prepare_training(self.dataset, config)
        first = train(first_setup, config)
        second = train(second_setup, config)
        self.assertEqual(_losses(first.history), _losses(second.history))
        for name, value in first_setup.params.items():
            np.testing.assert_array_equal(value, second_setup.params[name])

    @pytest.mark.stage_6_trainer_checks
    def test_resume_matches_uninterrupted_run(self):
        """
        Ensure resuming from an epoch checkpoint reproduces the remaining epochs bit for bit
        """
        config = self._config(checkpoint_every_epoch=True)
        full = train(prepare_training(self.dataset, config), config, TEST_RUN_PATH / 'full')
        self.assertEqual(config.epochs, len(full.checkpoints) - 1)

        checkpoint = load_checkpoint(TEST_RUN_PATH / 'full' / 'epoch0002.fcap')
        self.assertEqual(2, checkpoint.epoch)
        setup = setup_from_checkpoint(checkpoint, self.dataset, config)
        resumed = train(setup, config, TEST_RUN_PATH / 'resumed', resume=checkpoint)

        self.assertEqual([entry['epoch'] for entry in resumed.history], [0, 1, 2, 3])
        self.assertEqual(_losses(full.history), _losses(resumed.history))

    @pytest.mark.stage_6_trainer_checks
    def test_zero_learning_rate_keeps_weights(self):
        """
        Ensure base_lr 0 leaves every weight and the validation loss unchanged
        """
        config = self._config(base_lr=0.0)
        setup = prepare_training(self.dataset, config)
        initial = {name: value.copy() for name, value in setup.params.items()}
        report = train(setup, config)
        for name, value in initial.items():
            np.testing.assert_array_equal(value, setup.params[name])
        losses = [entry['val_loss'] for entry in report.history]
        self.assertEqual(1, len(set(losses)))

    @pytest.mark.stage_6_trainer_checks
    def test_frozen_output_layer(self):
        """
        Ensure the output layer keeps its PCA initialization when it is not trained
        """
        config = self._config(train_output_layer=False, epochs=2)
        setup = prepare_training(self.dataset, config)
        weight = setup.params['output.weight'].copy()
        hidden = setup.params['fc.weight'].copy()
        train(setup, config)
        np.testing.assert_array_equal(weight, setup.params['output.weight'])
        self.assertFalse(np.array_equal(hidden, setup.params['fc.weight']))

    @pytest.mark.stage_6_trainer_checks
    def test_fully_connected_run(self):
        """
        Ensure the fully connected network trains on input PCA coefficients
        """
        config = self._config(model='fc', epochs=2)
        setup = prepare_training(self.dataset, config)
        self.assertEqual((40,), setup.spec.input_shape)
        self.assertEqual(40, setup.encoder.input_basis.k)
        report = train(setup, config)
        self.assertTrue(all(np.isfinite(entry['val_loss']) for entry in report.history))

    @pytest.mark.stage_6_trainer_checks
    def test_divergence_keeps_last_good_checkpoint(self):
        """
        Ensure a non-finite loss stops training and saves the last good state
        """
        config = self._config()
        setup = prepare_training(self.dataset, config)
        setup.params['fc.bias'] = np.full_like(setup.params['fc.bias'], np.nan)
        with self.assertRaises(TrainingDivergedError) as context:
            train(setup, config, TEST_RUN_PATH)
        self.assertEqual(TEST_RUN_PATH / LAST_GOOD_NAME, context.exception.checkpoint_path)
        self.assertTrue((TEST_RUN_PATH / LAST_GOOD_NAME).exists())
        self.assertEqual(0, load_checkpoint(TEST_RUN_PATH / LAST_GOOD_NAME).epoch)
        self.assertFalse((TEST_RUN_PATH / CHECKPOINT_NAME).exists())


class SmallCorpusCheck(ExtendedTestCase):
    """
    Corpora too small to support a full output basis, and a degenerate one
    """

    def tearDown(self) -> None:
        clean_test_path()

    @pytest.mark.stage_6_trainer_checks
    def test_few_frames_still_train(self):
        """
        Ensure 100 training frames give a 160-row basis padded with zero-variance directions
        """
        dataset = generate_test_dataset(frames_per_shot=20)
        config = TrainConfig(**dict(TEST_TRAIN_PARAMS, epochs=2))
        setup = prepare_training(dataset, config)
        basis = setup.output_basis

        self.assertEqual(100, len(setup.train_data))
        self.assertEqual(160, basis.k)
        np.testing.assert_array_equal(np.zeros(61), basis.variances[99:])
        np.testing.assert_allclose(basis.components @ basis.components.T, np.eye(160),
                                   atol=1e-10)

        report = train(setup, config)
        self.assertTrue(all(np.isfinite(entry['val_loss']) for entry in report.history))

    @pytest.mark.stage_6_trainer_checks
    def test_too_few_vertices(self):
        """
        Ensure a mesh with fewer than 54 vertices is refused before any fitting
        """
        dataset = generate_test_dataset(vertex_count=50, frames_per_shot=5)
        error_message = 'Fewer coordinates than the penultimate width must raise ParameterError'
        self.assertRaisesWithMessage(error_message, ParameterError, prepare_training, dataset,
                                     TrainConfig(**TEST_TRAIN_PARAMS))

    @pytest.mark.stage_6_trainer_checks
    def test_constant_target_is_learned(self):
        """
        Ensure 200 training frames sharing one mesh reach a loss below 1e-6 within 50 epochs
        """
        dataset = copy.deepcopy(generate_test_dataset())
        constant = next(dataset.frames()).vertices.copy()
        for frame in dataset.frames():
            frame.vertices = constant
        config = TrainConfig(**dict(TEST_TRAIN_PARAMS, epochs=50))
        setup = prepare_training(dataset, config)
        self.assertEqual(200, len(setup.train_data))

        report = train(setup, config)
        self.assertLess(min(entry['train_loss'] for entry in report.history), 1e-6)
