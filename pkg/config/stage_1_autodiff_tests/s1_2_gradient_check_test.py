"""
Finite-difference gradient suite over every operation at 32-bit precision
"""
import unittest

import numpy as np
import pytest

from core_utils.autodiff import (Tensor, conv2d, dropout, flatten, grad_check, linear, mse_loss,
                                 relu, tanh)


print("Stage 1B: Validating Gradients")
print("Starting finite-difference checks")

INSTANCES = 20
TOLERANCE = 1e-3


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """
    Values with magnitude in [0.1, 1] so that ReLU kinks are never crossed
    """
    return (rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)) \
        .astype(np.float32)


class GradientSuite(unittest.TestCase):
    """
    Analytic gradients against central differences, epsilon 1e-3
    """

    @pytest.mark.stage_1_autodiff_checks
    def test_conv_stride_one_odd_extent(self):
        """
        Ensure convolution gradients with stride 1 on a 5 x 5 input
        """
        self._check_conv(stride=1, height=5, width=5)

    @pytest.mark.stage_1_autodiff_checks
    def test_conv_stride_two_odd_extent(self):
        """
        Ensure convolution gradients with stride 2 and asymmetric padding
        """
        self._check_conv(stride=2, height=7, width=5)

    @pytest.mark.stage_1_autodiff_checks
    def test_conv_stride_two_even_extent(self):
        """
        Ensure convolution gradients with stride 2 and a single trailing pad
        """
        self._check_conv(stride=2, height=6, width=4)

    def _check_conv(self, stride: int, height: int, width: int):
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = [Tensor(rng.normal(size=(1, 2, height, width)).astype(np.float32)),
                      Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32)),
                      Tensor(rng.normal(size=3).astype(np.float32))]
            out_h, out_w = -(-height // stride), -(-width // stride)
            target = Tensor(rng.normal(size=(1, 3, out_h, out_w)).astype(np.float32))

            def loss(tensors, target=target):
                return mse_loss(conv2d(tensors[0], tensors[1], tensors[2], stride), target)

            error = grad_check(loss, inputs, epsilon=1e-3, seed=instance)
            self.assertLess(error, TOLERANCE, f'conv stride {stride} instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_linear(self):
        """
        Ensure fully connected layer gradients for input, weight and bias
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = [Tensor(rng.normal(size=(4, 6)).astype(np.float32)),
                      Tensor(rng.normal(size=(5, 6)).astype(np.float32)),
                      Tensor(rng.normal(size=5).astype(np.float32))]
            target = Tensor(rng.normal(size=(4, 5)).astype(np.float32))

            def loss(tensors, target=target):
                return mse_loss(linear(tensors[0], tensors[1], tensors[2]), target)

            error = grad_check(loss, inputs, seed=instance)
            self.assertLess(error, TOLERANCE, f'linear instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_relu(self):
        """
        Ensure ReLU gradients with no input near the kink
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = Tensor(_away_from_zero(rng, (3, 7)))
            target = Tensor(rng.normal(size=(3, 7)).astype(np.float32))
            error = grad_check(lambda tensors, target=target: mse_loss(relu(tensors[0]), target),
                               inputs, seed=instance)
            self.assertLess(error, TOLERANCE, f'relu instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_tanh(self):
        """
        Ensure tanh gradients
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = Tensor(rng.normal(size=(3, 7)).astype(np.float32))
            target = Tensor(rng.normal(size=(3, 7)).astype(np.float32))
            error = grad_check(lambda tensors, target=target: mse_loss(tanh(tensors[0]), target),
                               inputs, seed=instance)
            self.assertLess(error, TOLERANCE, f'tanh instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_dropout(self):
        """
        Ensure dropout gradients in eval mode and with a fixed train-mode mask
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
            target = Tensor(rng.normal(size=(4, 5)).astype(np.float32))
            for train in (False, True):
                def loss(tensors, target=target, train=train, seed=instance):
                    return mse_loss(dropout(tensors[0], 0.2, train, seed), target)

                error = grad_check(loss, inputs, seed=instance)
                self.assertLess(error, TOLERANCE, f'dropout instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_mse_both_arguments(self):
        """
        Ensure the loss is differentiated with respect to prediction and target
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = [Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
                      Tensor(rng.normal(size=(3, 4)).astype(np.float32))]
            error = grad_check(lambda tensors: mse_loss(tensors[0], tensors[1]), inputs,
                               seed=instance)
            self.assertLess(error, TOLERANCE, f'mse instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_small_network(self):
        """
        Ensure gradients through convolution, flattening and two dense layers
        """
        for instance in range(INSTANCES):
            rng = np.random.default_rng(instance)
            inputs = [Tensor(rng.normal(size=(2, 1, 5, 5)).astype(np.float32)),
                      Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32)),
                      Tensor(rng.normal(size=(4, 18)).astype(np.float32) * 0.3),
                      Tensor(rng.normal(size=(3, 4)).astype(np.float32))]
            zeros = {size: Tensor(np.zeros(size, dtype=np.float32)) for size in (2, 3, 4)}
            target = Tensor(rng.normal(size=(2, 3)).astype(np.float32))

            def loss(tensors, target=target, zeros=zeros):
                features = flatten(conv2d(tensors[0], tensors[1], zeros[2], stride=2))
                hidden = tanh(linear(features, tensors[2], zeros[4]))
                return mse_loss(linear(hidden, tensors[3], zeros[3]), target)

            error = grad_check(loss, inputs, seed=instance)
            self.assertLess(error, TOLERANCE, f'network instance {instance}: {error}')

    @pytest.mark.stage_1_autodiff_checks
    def test_tiny_gradient_mismatch_is_reported(self):
        """
        Ensure gradients near 1e-8 are still compared relative to their own size
        """
        target = np.full(10, 1e-7, dtype=np.float32)

        def loss(tensors):
            # finite differences see a target shifted by 1e-7
            shift = 0.0 if tensors[0].requires_grad else 1e-7
            return mse_loss(tensors[0], Tensor(target.astype(np.float64) + shift))

        error = grad_check(loss, Tensor(np.zeros(10, dtype=np.float32)))
        self.assertGreater(error, 0.1)
