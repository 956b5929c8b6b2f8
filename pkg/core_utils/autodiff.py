"""
Dense tensors with reverse-mode differentiation.

Only the operations the two regression networks need are provided:
3x3 convolution, fully connected layers, ReLU, tanh, inverted dropout,
flattening and the mean square error loss.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from constants import USE_FLOAT64
from core_utils.errors import DimensionError, ParameterError, UsageError

DEFAULT_DTYPE = np.float64 if USE_FLOAT64 else np.float32
KERNEL_SIZE = 3

GradientFunction = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class OpNode:
    """
    Records how a tensor was produced
    """
    kind: str
    inputs: Tuple['Tensor', ...]
    backward: GradientFunction
    params: Dict[str, Union[int, float]] = field(default_factory=dict)


class Tensor:
    """
    Dense n-dimensional array stored row-major, with an optional gradient buffer.

    Data is read-only after construction; only the gradient buffer changes.
    """

    def __init__(self, data, requires_grad: bool = False, node: Optional[OpNode] = None,
                 dtype=None, copy: bool = True):
        if dtype is None:
            is_float_array = isinstance(data, (np.ndarray, np.generic)) \
                and np.issubdtype(data.dtype, np.floating)
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE

        if copy:
            array = np.array(data, dtype=dtype, copy=True)
        else:
            # frozen view, the caller's array stays writable
            array = np.asarray(data, dtype=dtype).view()
        array.flags.writeable = False

        self.data = array
        self.requires_grad = requires_grad
        self.node = node
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        """
        Value of a single-element tensor
        """
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, gradient: np.ndarray) -> None:
        """
        Adds a contribution to the gradient buffer
        """
        gradient = np.asarray(gradient, dtype=self.data.dtype).reshape(self.data.shape)
        if self.grad is None:
            self.grad = gradient.copy()
        else:
            self.grad += gradient

    def __repr__(self):
        kind = self.node.kind if self.node else 'leaf'
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, op={kind})'


def _result(data: np.ndarray, kind: str, inputs: Sequence[Tensor],
            backward: GradientFunction, **params) -> Tensor:
    """
    Wraps an op result, recording the graph only when a gradient is needed
    """
    if any(tensor.requires_grad for tensor in inputs):
        node = OpNode(kind=kind, inputs=tuple(inputs), backward=backward, params=params)
        return Tensor(data, requires_grad=True, node=node, copy=False)
    return Tensor(data, copy=False)


def same_ceil_padding(extent: int, stride: int) -> Tuple[int, int, int]:
    """
    Output extent and (before, after) padding of a 3x3 convolution.
    The output extent is ceil(extent / stride); an odd total pad puts the extra unit after.
    """
    out = -(-extent // stride)
    total = max((out - 1) * stride + KERNEL_SIZE - extent, 0)
    before = total // 2
    return out, before, total - before


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv2d(inputs: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """
    3x3 cross-correlation with SAME-ceil zero padding, N x Cin x H x W -> N x Cout x H' x W'
    """
    if stride not in (1, 2):
        raise ParameterError(f'Convolution stride must be 1 or 2, received {stride}')
    if inputs.data.ndim != 4:
        raise DimensionError(f'Convolution expects N x C x H x W input, received {inputs.shape}')
    batch, channels, height, width = inputs.shape
    if weight.data.ndim != 4 or weight.shape[1:] != (channels, KERNEL_SIZE, KERNEL_SIZE):
        raise DimensionError(f'Convolution weight {weight.shape} does not match '
                             f'{channels} input channels with a 3x3 kernel')
    out_channels = weight.shape[0]
    if bias.shape != (out_channels,):
        raise DimensionError(f'Convolution bias {bias.shape} does not match {out_channels} filters')

    out_h, top, bottom = same_ceil_padding(height, stride)
    out_w, left, right = same_ceil_padding(width, stride)
    dtype = np.result_type(inputs.data, weight.data)

    padded = np.pad(inputs.data.astype(dtype, copy=False),
                    ((0, 0), (0, 0), (top, bottom), (left, right)))
    columns = np.empty((batch, channels, KERNEL_SIZE, KERNEL_SIZE, out_h, out_w), dtype=dtype)
    for row in range(KERNEL_SIZE):
        for col in range(KERNEL_SIZE):
            columns[:, :, row, col] = padded[:, :, _window(row, stride, out_h),
                                             _window(col, stride, out_w)]
    columns = columns.reshape(batch, channels * KERNEL_SIZE * KERNEL_SIZE, out_h * out_w)
    weight_matrix = weight.data.astype(dtype, copy=False).reshape(out_channels, -1)

    output = np.matmul(weight_matrix, columns)
    output += bias.data.astype(dtype, copy=False)[None, :, None]
    output = output.reshape(batch, out_channels, out_h, out_w)

    need_input_grad = inputs.requires_grad
    padded_shape = padded.shape

    def backward(upstream):
        upstream = upstream.reshape(batch, out_channels, out_h * out_w)
        grad_weight = np.tensordot(upstream, columns, axes=([0, 2], [0, 2]))
        grad_bias = upstream.sum(axis=(0, 2))
        grad_input = None
        if need_input_grad:
            grad_columns = np.matmul(weight_matrix.T, upstream).reshape(
                batch, channels, KERNEL_SIZE, KERNEL_SIZE, out_h, out_w)
            grad_padded = np.zeros(padded_shape, dtype=dtype)
            for row in range(KERNEL_SIZE):
                for col in range(KERNEL_SIZE):
                    grad_padded[:, :, _window(row, stride, out_h),
                                _window(col, stride, out_w)] += grad_columns[:, :, row, col]
            grad_input = grad_padded[:, :, top:top + height, left:left + width]
        return grad_input, grad_weight.reshape(weight.shape), grad_bias

    return _result(output, 'conv2d', (inputs, weight, bias), backward,
                   stride=stride, pad_top=top, pad_left=left)


def linear(inputs: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Fully connected layer: inputs . weight^T + bias
    """
    if inputs.data.ndim != 2 or weight.data.ndim != 2 or inputs.shape[1] != weight.shape[1]:
        raise DimensionError(f'Linear layer weight {weight.shape} does not accept input {inputs.shape}')
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f'Linear layer bias {bias.shape} does not match weight {weight.shape}')

    dtype = np.result_type(inputs.data, weight.data)
    x_data = inputs.data.astype(dtype, copy=False)
    w_data = weight.data.astype(dtype, copy=False)
    output = x_data @ w_data.T + bias.data.astype(dtype, copy=False)

    def backward(upstream):
        return upstream @ w_data, upstream.T @ x_data, upstream.sum(axis=0)

    return _result(output, 'linear', (inputs, weight, bias), backward)


def relu(inputs: Tensor) -> Tensor:
    """
    max(0, x); the derivative at exactly zero is zero
    """
    active = inputs.data > 0
    output = np.where(active, inputs.data, 0).astype(inputs.dtype)

    def backward(upstream):
        return (upstream * active,)

    return _result(output, 'relu', (inputs,), backward)


def tanh(inputs: Tensor) -> Tensor:
    output = np.tanh(inputs.data)

    def backward(upstream):
        return (upstream * (1 - output * output),)

    return _result(output, 'tanh', (inputs,), backward)


def activation(inputs: Tensor, kind: str) -> Tensor:
    """
    Applies a named activation: relu, tanh or linear
    """
    if kind == 'relu':
        return relu(inputs)
    if kind == 'tanh':
        return tanh(inputs)
    if kind == 'linear':
        return inputs
    raise ParameterError(f'Unknown activation: {kind}')


def dropout(inputs: Tensor, probability: float, train: bool, seed: int = 0) -> Tensor:
    """
    Inverted dropout. In train mode each element is zeroed with the given probability
    and survivors are scaled by 1 / (1 - probability); the mask depends only on the seed.
    Eval mode is the identity.
    """
    if not 0 <= probability < 1:
        raise ParameterError(f'Dropout probability must be in [0, 1), received {probability}')
    if not train or probability == 0:
        return inputs

    keep = np.random.default_rng(seed).random(inputs.shape) >= probability
    scaled_mask = keep.astype(inputs.dtype) * inputs.dtype.type(1.0 / (1.0 - probability))
    output = inputs.data * scaled_mask

    def backward(upstream):
        return (upstream * scaled_mask,)

    return _result(output, 'dropout', (inputs,), backward, p=probability, seed=seed)


def flatten(inputs: Tensor) -> Tensor:
    """
    N x ... -> N x D
    """
    original_shape = inputs.shape
    output = inputs.data.reshape(original_shape[0], -1)

    def backward(upstream):
        return (upstream.reshape(original_shape),)

    return _result(output, 'flatten', (inputs,), backward)


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """
    Mean over all elements of the squared difference, accumulated in 64 bits
    """
    if prediction.shape != target.shape:
        raise DimensionError(f'Prediction {prediction.shape} and target {target.shape} differ in shape')

    difference = prediction.data.astype(np.float64) - target.data.astype(np.float64)
    count = max(difference.size, 1)
    loss = np.mean(difference * difference) if difference.size else np.float64(0.0)

    def backward(upstream):
        grad = (2.0 / count) * float(upstream) * difference
        return grad.astype(prediction.dtype), (-grad).astype(target.dtype)

    return _result(np.float64(loss), 'mse', (prediction, target), backward)


def _topological_order(root: Tensor) -> List[Tensor]:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> List[Tensor]:
    """
    Fills the gradient buffers of every tensor that requires a gradient.
    Leaf gradients accumulate across calls; returns the leaves reached.
    """
    if root.data.size != 1:
        raise UsageError(f'Backward needs a scalar root, received shape {root.shape}')
    if not root.requires_grad:
        raise UsageError('Backward root does not depend on any tensor that requires a gradient')

    order = _topological_order(root)
    for tensor in order:
        if tensor.node is not None:
            tensor.grad = None
    root.accumulate_grad(np.ones_like(root.data))

    leaves = []
    for tensor in reversed(order):
        node = tensor.node
        if node is None:
            if tensor.requires_grad:
                leaves.append(tensor)
            continue
        if tensor.grad is None:
            continue
        for parent, gradient in zip(node.inputs, node.backward(tensor.grad)):
            if gradient is not None and parent.requires_grad:
                parent.accumulate_grad(gradient)
    return leaves


def grad_check(subgraph: Callable[[List[Tensor]], Tensor],
               inputs: Union[Tensor, Sequence[Tensor]],
               epsilon: float = 1e-3, samples: int = 20, seed: int = 0,
               floor: float = 1e-8) -> float:
    """
    Compares analytic gradients against central finite differences.

    subgraph maps a list of tensors to a scalar loss and must be deterministic.
    Analytic gradients use the inputs' precision; the numeric oracle
    re-evaluates the subgraph in 64 bits. Returns the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, floor) over sampled coordinates.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    leaves = [Tensor(tensor.data, requires_grad=True) for tensor in inputs]
    backward(subgraph(leaves))

    rng = np.random.default_rng(seed)
    bases = [tensor.data.astype(np.float64) for tensor in inputs]

    def evaluate(position, array):
        shifted_inputs = [Tensor(array if index == position else base)
                          for index, base in enumerate(bases)]
        return subgraph(shifted_inputs).item()

    worst = 0.0
    for position, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        size = leaf.data.size
        picks = np.arange(size) if size <= samples else rng.choice(size, samples, replace=False)
        for flat_index in picks:
            coordinate = np.unravel_index(flat_index, leaf.shape)
            shifted = bases[position].copy()
            shifted[coordinate] += epsilon
            upper = evaluate(position, shifted)
            shifted[coordinate] -= 2 * epsilon
            lower = evaluate(position, shifted)

            numeric = (upper - lower) / (2 * epsilon)
            exact = float(analytic[coordinate])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)

    logger.debug('Gradient check over {} inputs: max relative error {:.3e}', len(inputs), worst)
    return worst
