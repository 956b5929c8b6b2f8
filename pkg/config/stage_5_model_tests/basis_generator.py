"""
Generates PCA bases and small model setups for testing purposes
"""
from typing import Tuple

import numpy as np

from constants import PENULTIMATE_WIDTH
from core_utils.pca import PcaBasis, WhiteningStats
from model import InputEncoder, ModelSpec, Parameters, build, initialize

# 60 vertices: the smallest multiple of 3 that holds a full 160-component basis
TEST_OUTPUT_WIDTH = 180
TEST_INPUT_SHAPE = (1, 24, 32)


def random_basis(dimension: int = TEST_OUTPUT_WIDTH, k: int = PENULTIMATE_WIDTH,
                 seed: int = 0) -> PcaBasis:
    '''
    Orthonormal components with descending variances around a random mean
    '''
    rng = np.random.default_rng(seed)
    orthonormal, _ = np.linalg.qr(rng.normal(size=(dimension, k)))
    variances = np.linspace(2.0, 0.1, k)
    return PcaBasis(mean=rng.normal(size=dimension), components=orthonormal.T,
                    variances=variances, total_variance=float(variances.sum() * 1.1))


def small_conv_model(seed: int = 0) -> Tuple[ModelSpec, Parameters, PcaBasis]:
    '''
    Convolutional network on 24 x 32 images with every hidden width divided by 16
    '''
    spec = build('conv', TEST_OUTPUT_WIDTH, input_shape=TEST_INPUT_SHAPE, width_divisor=16)
    basis = random_basis()
    return spec, initialize(spec, seed, basis), basis


def small_fc_model(n_in: int = 40, seed: int = 0) -> Tuple[ModelSpec, Parameters, PcaBasis]:
    '''
    Fully connected network on n_in coefficients with every hidden width divided by 16
    '''
    spec = build('fc', TEST_OUTPUT_WIDTH, n_in=n_in, width_divisor=16)
    basis = random_basis()
    return spec, initialize(spec, seed, basis), basis


def conv_encoder() -> InputEncoder:
    return InputEncoder(kind='conv', whitening=WhiteningStats(mean=0.4, std=0.2))
