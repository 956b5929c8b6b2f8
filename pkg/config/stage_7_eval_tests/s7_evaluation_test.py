"""
Tests for vertex RMSE, result files, basis drift and the throughput benchmark
"""
import csv
import json

import numpy as np
import pytest

from config.stage_1_autodiff_tests.s1_1_tensor_ops_test import ExtendedTestCase
from config.stage_4_dataset_tests.dataset_generator import clean_test_path, generate_test_dataset
from config.stage_5_model_tests.basis_generator import (conv_encoder, random_basis,
                                                        small_conv_model)
from config.test_params import TEST_PATH, TEST_TRAIN_PARAMS
from core_utils.errors import DimensionError, ParameterError
from evaluation import (EvaluationPipeline, RmseSeries, basis_drift, benchmark_throughput,
                        export_csv, mse_to_rmse_mm, vertex_rmse)
from model import Checkpoint
from trainer import TrainConfig, prepare_training


print("Stage 7: Validating Evaluation")
print("Starting tests for error metrics and benchmarks")


class VertexRmseCheck(ExtendedTestCase):
    """
    Per-frame Euclidean RMSE in millimeters
    """

    @pytest.mark.stage_7_eval_checks
    def test_uniform_offset(self):
        """
        Ensure a 0.05 cm shift of every vertex is 0.5 mm in every frame
        """
        target = np.random.default_rng(0).normal(size=(4, 10, 3))
        prediction = target + np.array([0.05, 0.0, 0.0])
        series = vertex_rmse(prediction, target)
        np.testing.assert_allclose(series.values, 0.5, atol=1e-9)
        self.assertAlmostEqual(0.5, series.pooled(), places=9)

    @pytest.mark.stage_7_eval_checks
    def test_brute_force_oracle(self):
        """
        Ensure masked RMSE agrees with an explicit loop over frames and vertices
        """
        rng = np.random.default_rng(1)
        target = rng.normal(size=(5, 12, 3))
        prediction = target + rng.normal(scale=0.1, size=target.shape)
        mask = rng.random(12) > 0.4
        mask[0] = True
        series = vertex_rmse(prediction, target, mask)

        for frame in range(5):
            squares = [sum((prediction[frame, vertex, axis] - target[frame, vertex, axis]) ** 2
                           for axis in range(3))
                       for vertex in range(12) if mask[vertex]]
            expected = 10.0 * (sum(squares) / len(squares)) ** 0.5
            self.assertAlmostEqual(expected, series.values[frame], places=9)

    @pytest.mark.stage_7_eval_checks
    def test_masked_vertices_are_ignored(self):
        """
        Ensure errors on rigid vertices do not count
        """
        target = np.zeros((2, 4, 3))
        prediction = target.copy()
        prediction[:, 3] = 100.0
        mask = np.array([True, True, True, False])
        np.testing.assert_array_equal(vertex_rmse(prediction, target, mask).values, 0.0)

    @pytest.mark.stage_7_eval_checks
    def test_training_loss_conversion(self):
        """
        Ensure the per-coordinate MSE in cm² converts to the pooled RMSE in mm
        """
        self.assertAlmostEqual(0.9165, mse_to_rmse_mm(0.0028), places=4)
        self.assertAlmostEqual(1.0, mse_to_rmse_mm(0.01 / 3), places=12)
        self.assertEqual(0.0, mse_to_rmse_mm(0.0))

        rng = np.random.default_rng(2)
        target = rng.normal(size=(6, 8, 3))
        prediction = target + rng.normal(scale=0.05, size=target.shape)
        mse = float(np.mean((prediction - target) ** 2))
        self.assertAlmostEqual(vertex_rmse(prediction, target).pooled(), mse_to_rmse_mm(mse),
                               places=9)

    @pytest.mark.stage_7_eval_checks
    def test_per_shot_and_summary(self):
        """
        Ensure frames are pooled per shot and summarized
        """
        series = RmseSeries(values=np.array([3.0, 4.0, 1.0]),
                            identifiers=[(0, 0), (0, 1), (2, 0)])
        per_shot = series.per_shot()
        self.assertAlmostEqual(np.sqrt(12.5), per_shot[0])
        self.assertAlmostEqual(1.0, per_shot[2])
        summary = series.summary()
        self.assertEqual(3, summary['frames'])
        self.assertAlmostEqual(np.sqrt(26 / 3), summary['rmse_mm'])
        self.assertEqual(4.0, summary['max_frame_rmse_mm'])
        self.assertEqual({'0', '2'}, set(summary['per_shot_rmse_mm']))
        self.assertEqual(0.0, RmseSeries(values=np.zeros(0)).pooled())

    @pytest.mark.stage_7_eval_checks
    def test_errors(self):
        """
        Ensure mismatched shapes, empty masks and negative losses are rejected
        """
        error_message = 'Shape mismatch must raise DimensionError'
        self.assertRaisesWithMessage(error_message, DimensionError, vertex_rmse,
                                     np.zeros((2, 4, 3)), np.zeros((2, 5, 3)))
        error_message = 'Empty mask must raise ParameterError'
        self.assertRaisesWithMessage(error_message, ParameterError, vertex_rmse,
                                     np.zeros((2, 4, 3)), np.zeros((2, 4, 3)), np.zeros(4))
        error_message = 'Negative MSE must raise ParameterError'
        self.assertRaisesWithMessage(error_message, ParameterError, mse_to_rmse_mm, -1.0)


class ResultFilesCheck(ExtendedTestCase):
    """
    CSV export and basis drift
    """

    def setUp(self) -> None:
        TEST_PATH.mkdir(parents=True, exist_ok=True)

    def tearDown(self) -> None:
        clean_test_path()

    @pytest.mark.stage_7_eval_checks
    def test_empty_series_writes_header(self):
        """
        Ensure an empty series produces only the header row
        """
        path = TEST_PATH / 'empty.csv'
        export_csv(RmseSeries(values=np.zeros(0)), path)
        with path.open(encoding='utf-8') as file:
            self.assertEqual([['shot', 'frame', 'rmse_mm']], list(csv.reader(file)))

    @pytest.mark.stage_7_eval_checks
    def test_rows_follow_frames(self):
        """
        Ensure one row per frame in order with six significant digits
        """
        path = TEST_PATH / 'rmse.csv'
        series = RmseSeries(values=np.array([0.123456789, 2.5]), identifiers=[(1, 0), (1, 1)])
        export_csv(series, path)
        with path.open(encoding='utf-8') as file:
            rows = list(csv.reader(file))[1:]
        self.assertEqual([['1', '0', '0.123457'], ['1', '1', '2.5']], rows)

    @pytest.mark.stage_7_eval_checks
    def test_basis_drift(self):
        """
        Ensure an untouched output layer has drift 1 and a rotated one less
        """
        basis = random_basis()
        self.assertAlmostEqual(1.0, basis_drift(basis, basis.components.T), places=9)
        mixed = basis.components.T @ np.diag(np.linspace(0.5, 2.0, 160))
        self.assertAlmostEqual(1.0, basis_drift(basis, mixed), places=9)

        wide = random_basis(dimension=600)
        other = random_basis(dimension=600, seed=1)
        self.assertLess(basis_drift(wide, other.components.T), 0.9)
        error_message = 'Wrong weight shape must raise DimensionError'
        self.assertRaisesWithMessage(error_message, DimensionError, basis_drift, basis,
                                     np.zeros((180, 100)))


class BenchmarkCheck(ExtendedTestCase):
    """
    Online and batched throughput
    """

    def setUp(self) -> None:
        spec, params, basis = small_conv_model()
        self.checkpoint = Checkpoint(spec=spec, params=params, encoder=conv_encoder(),
                                     output_basis=basis)
        self.images = np.random.default_rng(3).random((400, 24, 32)).astype(np.float32)

    @pytest.mark.stage_7_eval_checks
    def test_batching_pays_off(self):
        """
        Ensure batch 200 is at least twice as fast as batch 1 with the same outputs
        """
        report = benchmark_throughput(self.checkpoint, self.images)
        self.assertEqual(400, report.frame_count)
        self.assertEqual(200, report.batch_size)
        self.assertGreaterEqual(report.speedup, 2.0)
        self.assertLessEqual(report.max_batch_difference, 1e-5)
        self.assertIn('cpu_count', report.parallelism)
        self.assertIsNone(report.end_to_end_online_fps)

    @pytest.mark.slow
    @pytest.mark.stage_7_eval_checks
    def test_rate_does_not_depend_on_frame_count(self):
        """
        Ensure doubling the frame count changes the steady-state frame rate by less than 10%
        """
        images = np.concatenate([self.images, self.images])

        def best_rates(frames: np.ndarray) -> np.ndarray:
            reports = [benchmark_throughput(self.checkpoint, frames) for _ in range(3)]
            return np.array([max(report.online_fps for report in reports),
                             max(report.batched_fps for report in reports)])

        ratios = best_rates(images) / best_rates(self.images)
        self.assertTrue(np.all(np.abs(ratios - 1.0) < 0.1), f'rate ratios {ratios}')

    @pytest.mark.stage_7_eval_checks
    def test_end_to_end_timing(self):
        """
        Ensure encoding is timed separately on request
        """
        report = benchmark_throughput(self.checkpoint, self.images[:40], batch_sizes=(1, 20),
                                      warmup=1, end_to_end=True)
        self.assertGreater(report.end_to_end_online_fps, 0.0)
        self.assertGreater(report.end_to_end_batched_fps, 0.0)
        self.assertIn('speedup', report.to_dict())

    @pytest.mark.stage_7_eval_checks
    def test_too_few_frames(self):
        """
        Ensure fewer frames than one large batch are rejected
        """
        error_message = 'Too few frames must raise ParameterError'
        self.assertRaisesWithMessage(error_message, ParameterError, benchmark_throughput,
                                     self.checkpoint, self.images[:100])


class EvaluationPipelineCheck(ExtendedTestCase):
    """
    Scoring a checkpoint on a dataset
    """

    @classmethod
    def setUpClass(cls) -> None:
        cls.dataset = generate_test_dataset()

    def tearDown(self) -> None:
        clean_test_path()

    def _checkpoint(self, kind: str) -> Checkpoint:
        setup = prepare_training(self.dataset, TrainConfig(**dict(TEST_TRAIN_PARAMS, model=kind)))
        return Checkpoint(spec=setup.spec, params=setup.params, encoder=setup.encoder,
                          output_basis=setup.output_basis)

    @pytest.mark.stage_7_eval_checks
    def test_pipeline_writes_results(self):
        """
        Ensure the pipeline writes per-frame RMSE, a chart and a summary
        """
        summary = EvaluationPipeline(self._checkpoint('conv'), self.dataset).run(TEST_PATH / 'eval')
        self.assertEqual(240, summary['frames'])
        self.assertGreater(summary['rmse_mm'], 0.0)
        self.assertAlmostEqual(1.0, summary['basis_drift'], places=5)

        with (TEST_PATH / 'eval' / 'rmse.csv').open(encoding='utf-8') as file:
            self.assertEqual(241, len(list(csv.reader(file))))
        self.assertTrue((TEST_PATH / 'eval' / 'rmse.png').exists())
        with (TEST_PATH / 'eval' / 'summary.json').open(encoding='utf-8') as file:
            self.assertEqual(summary['rmse_mm'], json.load(file)['rmse_mm'])

    @pytest.mark.stage_7_eval_checks
    def test_fully_connected_pipeline(self):
        """
        Ensure the fully connected network is scored on stabilized frames
        """
        pipeline = EvaluationPipeline(self._checkpoint('fc'), self.dataset)
        self.assertEqual((240, 60, 3), pipeline.predictions().shape)
        self.assertTrue(np.isfinite(pipeline.run()['rmse_mm']))
