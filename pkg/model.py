"""
Convolutional and fully connected regression networks: construction,
initialization, forward passes and checkpoint persistence
"""
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from constants import (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONV_FLATTENED_FEATURES, CONV_WIDTHS,
                       DROPOUT_PROBABILITY, FC_WIDTHS, IMAGE_SHAPE, INPUT_PCA_COMPONENTS,
                       PENULTIMATE_WIDTH)
from core_utils import autodiff
from core_utils.autodiff import DEFAULT_DTYPE, KERNEL_SIZE, Tensor, same_ceil_padding
from core_utils.errors import DataError, DimensionError, ParameterError
from core_utils.pca import PcaBasis, WhiteningStats, apply_whitening, project
from core_utils.seeding import DROPOUT_STREAM, INIT_STREAM, derive_seed

MODEL_KINDS = ('conv', 'fc')
ACTIVATION_NAMES = {'relu': 'ReLU', 'tanh': 'tanh activation', 'linear': 'linear activation'}
Parameters = Dict[str, np.ndarray]


class CheckpointFormatError(DataError):
    """
    Checkpoint file has a bad magic, an unknown version or is truncated
    """


@dataclass(frozen=True)
class LayerSpec:
    """
    One row of the layer table
    """
    name: str
    kind: str
    n_in: int = 0
    n_out: int = 0
    stride: int = 1
    activation: str = 'linear'
    probability: float = 0.0

    @property
    def has_parameters(self) -> bool:
        return self.kind in ('conv', 'fc')

    @property
    def fan_in(self) -> int:
        return self.n_in * KERNEL_SIZE * KERNEL_SIZE if self.kind == 'conv' else self.n_in

    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == 'conv':
            return self.n_out, self.n_in, KERNEL_SIZE, KERNEL_SIZE
        return self.n_out, self.n_in


@dataclass(frozen=True)
class ModelSpec:
    """
    Declarative description of a network
    """
    kind: str
    layers: Tuple[LayerSpec, ...]
    n_out: int
    input_shape: Tuple[int, ...]
    width_divisor: int = 1

    @property
    def penultimate_width(self) -> int:
        return self.layers[-1].n_in

    @property
    def output_layer(self) -> LayerSpec:
        return self.layers[-1]

    def parameter_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.has_parameters]

    def parameter_count(self) -> int:
        return sum(int(np.prod(layer.weight_shape())) + layer.n_out
                   for layer in self.parameter_layers())

    def to_dict(self) -> dict:
        values = asdict(self)
        values['input_shape'] = list(self.input_shape)
        return values

    @classmethod
    def from_dict(cls, values: dict) -> 'ModelSpec':
        return cls(kind=values['kind'],
                   layers=tuple(LayerSpec(**layer) for layer in values['layers']),
                   n_out=int(values['n_out']),
                   input_shape=tuple(values['input_shape']),
                   width_divisor=int(values.get('width_divisor', 1)))


def _scaled(width: int, divisor: int) -> int:
    return max(1, width // divisor)


def build(kind: str, n_out: int, input_shape: Optional[Sequence[int]] = None,
          width_divisor: int = 1, n_in: int = INPUT_PCA_COMPONENTS) -> ModelSpec:
    """
    Layer tables of both networks. width_divisor shrinks every hidden width
    for desk-scale runs; with the defaults the tables are reproduced exactly
    """
    if kind not in MODEL_KINDS:
        raise ParameterError(f'Unknown model kind {kind}, expected one of {MODEL_KINDS}')
    if n_out < 3 or n_out % 3:
        raise ParameterError(f'Output width must be a positive multiple of 3, received {n_out}')
    if width_divisor < 1:
        raise ParameterError(f'Width divisor must be at least 1, received {width_divisor}')

    if kind == 'conv':
        return _build_conv(n_out, tuple(input_shape or IMAGE_SHAPE), width_divisor)
    return _build_fc(n_out, int(input_shape[0]) if input_shape else n_in, width_divisor)


def _build_conv(n_out: int, input_shape: Tuple[int, ...], width_divisor: int) -> ModelSpec:
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise DimensionError(f'Convolutional input must be C x H x W, received {input_shape}')
    channels, height, width = input_shape
    layers = []
    for index, base_width in enumerate(CONV_WIDTHS, start=1):
        out_channels = _scaled(base_width, width_divisor)
        for suffix, stride in (('a', 2), ('b', 1)):
            layers.append(LayerSpec(name=f'conv{index}{suffix}', kind='conv', n_in=channels,
                                    n_out=out_channels, stride=stride, activation='relu'))
            channels = out_channels
            height = same_ceil_padding(height, stride)[0]
            width = same_ceil_padding(width, stride)[0]

    features = channels * height * width
    if tuple(input_shape) == IMAGE_SHAPE and width_divisor == 1 \
            and features != CONV_FLATTENED_FEATURES:
        raise DimensionError(f'Shape algebra gives {features} features instead of '
                             f'{CONV_FLATTENED_FEATURES}')
    layers.extend([
        LayerSpec(name='flatten', kind='flatten', n_in=features, n_out=features),
        LayerSpec(name='drop', kind='dropout', n_in=features, n_out=features,
                  probability=DROPOUT_PROBABILITY),
        LayerSpec(name='fc', kind='fc', n_in=features, n_out=PENULTIMATE_WIDTH),
        LayerSpec(name='output', kind='fc', n_in=PENULTIMATE_WIDTH, n_out=n_out),
    ])
    return ModelSpec(kind='conv', layers=tuple(layers), n_out=n_out,
                     input_shape=tuple(input_shape), width_divisor=width_divisor)


def _build_fc(n_out: int, n_in: int, width_divisor: int) -> ModelSpec:
    if n_in < 1:
        raise DimensionError(f'Fully connected input width must be positive, received {n_in}')
    first, second = (_scaled(width, width_divisor) for width in FC_WIDTHS)
    layers = (
        LayerSpec(name='fc1', kind='fc', n_in=n_in, n_out=first, activation='relu'),
        LayerSpec(name='drop1', kind='dropout', n_in=first, n_out=first,
                  probability=DROPOUT_PROBABILITY),
        LayerSpec(name='fc2', kind='fc', n_in=first, n_out=second, activation='tanh'),
        LayerSpec(name='drop2', kind='dropout', n_in=second, n_out=second,
                  probability=DROPOUT_PROBABILITY),
        LayerSpec(name='fc3', kind='fc', n_in=second, n_out=PENULTIMATE_WIDTH),
        LayerSpec(name='output', kind='fc', n_in=PENULTIMATE_WIDTH, n_out=n_out),
    )
    return ModelSpec(kind='fc', layers=layers, n_out=n_out, input_shape=(n_in,),
                     width_divisor=width_divisor)


def describe(spec: ModelSpec) -> str:
    """
    Layer table as text
    """
    if spec.kind == 'conv':
        rows = [('input', 'Image {}'.format('×'.join(str(extent) for extent in spec.input_shape)))]
    else:
        rows = [('input', f'{spec.input_shape[0]} PCA coefficients')]

    for layer in spec.layers:
        activation = ACTIVATION_NAMES[layer.activation]
        if layer.kind == 'conv':
            rows.append((layer.name, f'Conv 3×3, {layer.n_in}→{layer.n_out}, '
                                     f'stride {layer.stride}×{layer.stride}, {activation}'))
        elif layer.kind == 'dropout':
            rows.append((layer.name, f'Dropout, p = {layer.probability}'))
        elif layer.kind == 'fc':
            rows.append((layer.name, f'Fully connected {layer.n_in}→{layer.n_out}, {activation}'))

    name_width = max(len(name) for name, _ in rows) + 2
    header = f'{"Name":<{name_width}}Description'
    lines = [header, '-' * len(header)]
    lines.extend(f'{name:<{name_width}}{text}' for name, text in rows)
    lines.append(f'Parameters: {spec.parameter_count()}')
    return '\n'.join(lines)


def initialize(spec: ModelSpec, seed: int, output_basis: PcaBasis) -> Parameters:
    """
    He-normal weights and zero biases everywhere except the output layer,
    which is set to the PCA basis: weight = components^T, bias = mean
    """
    output_layer = spec.output_layer
    if output_basis.k != output_layer.n_in:
        raise DimensionError(f'Output basis has {output_basis.k} components, penultimate layer '
                             f'has width {output_layer.n_in}')
    if output_basis.dimension != output_layer.n_out:
        raise DimensionError(f'Output basis dimension {output_basis.dimension} does not match '
                             f'output width {output_layer.n_out}')

    rng = np.random.default_rng(derive_seed(seed, INIT_STREAM))
    params = {}
    for layer in spec.parameter_layers():
        if layer is output_layer:
            params[f'{layer.name}.weight'] = output_basis.components.T.astype(DEFAULT_DTYPE)
            params[f'{layer.name}.bias'] = output_basis.mean.astype(DEFAULT_DTYPE)
            continue
        std = np.sqrt(2.0 / layer.fan_in)
        weight = rng.normal(0.0, std, layer.weight_shape())
        params[f'{layer.name}.weight'] = weight.astype(DEFAULT_DTYPE)
        params[f'{layer.name}.bias'] = np.zeros(layer.n_out, dtype=DEFAULT_DTYPE)
    logger.info('Initialized {} model: {} parameters', spec.kind, spec.parameter_count())
    return params


def forward_batch(params: Mapping[str, Union[np.ndarray, Tensor]], spec: ModelSpec,
                  batch: Union[np.ndarray, Tensor], mode: str = 'eval', seed: int = 0) -> Tensor:
    """
    Runs the network on an encoded batch: whitened N x C x H x W images for
    the convolutional network, N x D PCA coefficients for the fully connected one.
    Dropout layers draw their masks from seeds derived from (seed, layer index)
    """
    if mode not in ('train', 'eval'):
        raise ParameterError(f'Mode must be train or eval, received {mode}')
    tensor = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=DEFAULT_DTYPE, copy=False)
    if tensor.shape[1:] != tuple(spec.input_shape):
        raise DimensionError(f'Batch items have shape {tensor.shape[1:]}, model expects '
                             f'{tuple(spec.input_shape)}')

    def parameter(name: str) -> Tensor:
        value = params[name]
        return value if isinstance(value, Tensor) else Tensor(value, copy=False)

    train = mode == 'train'
    for index, layer in enumerate(spec.layers):
        if layer.kind == 'conv':
            tensor = autodiff.conv2d(tensor, parameter(f'{layer.name}.weight'),
                                     parameter(f'{layer.name}.bias'), layer.stride)
            tensor = autodiff.activation(tensor, layer.activation)
        elif layer.kind == 'fc':
            tensor = autodiff.linear(tensor, parameter(f'{layer.name}.weight'),
                                     parameter(f'{layer.name}.bias'))
            tensor = autodiff.activation(tensor, layer.activation)
        elif layer.kind == 'flatten':
            tensor = autodiff.flatten(tensor)
        elif layer.kind == 'dropout':
            tensor = autodiff.dropout(tensor, layer.probability, train,
                                      derive_seed(seed, DROPOUT_STREAM, index))
    return tensor


@dataclass
class InputEncoder:
    """
    Maps [0, 1] images into the network input space. The convolutional network
    sees globally whitened images; the fully connected one sees input PCA
    coefficients of pose-stabilized images
    """
    kind: str
    whitening: Optional[WhiteningStats] = None
    input_basis: Optional[PcaBasis] = None

    def encode(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if self.kind == 'conv':
            if self.whitening is None:
                raise ParameterError('Convolutional encoder needs whitening statistics')
            return apply_whitening(images, self.whitening)[:, None, :, :].astype(DEFAULT_DTYPE)
        if self.input_basis is None:
            raise ParameterError('Fully connected encoder needs an input PCA basis')
        flat = images.reshape(images.shape[0], -1)
        return project(self.input_basis, flat).astype(DEFAULT_DTYPE)


def predict(params: Mapping[str, np.ndarray], spec: ModelSpec, encoder: InputEncoder,
            images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """
    Eval-mode vertex predictions N x V x 3 for [0, 1] images
    """
    outputs = []
    for start in range(0, len(images), batch_size):
        encoded = encoder.encode(images[start:start + batch_size])
        outputs.append(forward_batch(params, spec, encoded, mode='eval').data)
    if not outputs:
        return np.zeros((0, spec.n_out // 3, 3), dtype=DEFAULT_DTYPE)
    return np.concatenate(outputs).reshape(len(images), spec.n_out // 3, 3)


@dataclass
class Checkpoint:
    """
    Everything needed to run inference or to resume training
    """
    spec: ModelSpec
    params: Parameters
    encoder: InputEncoder
    output_basis: Optional[PcaBasis] = None
    step: int = 0
    epoch: int = 0
    seed: int = 0
    adam_step: int = 0
    adam_first: Parameters = field(default_factory=dict)
    adam_second: Parameters = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


SECTION_JSON = 0
SECTION_TENSOR = 1
_HEADER = struct.Struct('<4sII')
_SECTION_NAME = struct.Struct('<I')
_SECTION_BODY = struct.Struct('<BQ')


def _tensor_payload(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    itemsize = 8 if array.dtype == np.float64 else 4
    parts = [struct.pack('<BI', itemsize, array.ndim)]
    parts.extend(struct.pack('<I', extent) for extent in array.shape)
    parts.append(np.ascontiguousarray(array, dtype=f'<f{itemsize}').tobytes())
    return b''.join(parts)


def _basis_sections(prefix: str, basis: Optional[PcaBasis]) -> List[Tuple[str, int, bytes]]:
    if basis is None:
        return []
    return [(f'{prefix}/{name}', SECTION_TENSOR, _tensor_payload(getattr(basis, name)))
            for name in ('mean', 'components', 'variances')]


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    """
    Writes the checkpoint atomically: magic, version, section count, then
    length-prefixed JSON and tensor sections
    """
    meta = dict(checkpoint.meta)
    meta.update({
        'step': checkpoint.step,
        'epoch': checkpoint.epoch,
        'seed': checkpoint.seed,
        'adam_step': checkpoint.adam_step,
        'encoder': checkpoint.encoder.kind,
        'whitening': asdict(checkpoint.encoder.whitening) if checkpoint.encoder.whitening else None,
        'input_total_variance': checkpoint.encoder.input_basis.total_variance
        if checkpoint.encoder.input_basis else None,
        'output_total_variance': checkpoint.output_basis.total_variance
        if checkpoint.output_basis else None,
    })
    sections = [
        ('spec', SECTION_JSON, json.dumps(checkpoint.spec.to_dict()).encode('utf-8')),
        ('meta', SECTION_JSON, json.dumps(meta).encode('utf-8')),
    ]
    sections.extend((f'param/{name}', SECTION_TENSOR, _tensor_payload(value))
                    for name, value in checkpoint.params.items())
    sections.extend(_basis_sections('input_basis', checkpoint.encoder.input_basis))
    sections.extend(_basis_sections('output_basis', checkpoint.output_basis))
    sections.extend((f'adam_first/{name}', SECTION_TENSOR, _tensor_payload(value))
                    for name, value in checkpoint.adam_first.items())
    sections.extend((f'adam_second/{name}', SECTION_TENSOR, _tensor_payload(value))
                    for name, value in checkpoint.adam_second.items())

    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sections))]
    for name, kind, payload in sections:
        encoded_name = name.encode('utf-8')
        chunks.append(_SECTION_NAME.pack(len(encoded_name)) + encoded_name)
        chunks.append(_SECTION_BODY.pack(kind, len(payload)) + payload)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + '.tmp')
    temporary.write_bytes(b''.join(chunks))
    os.replace(temporary, path)
    logger.info('Saved checkpoint at step {} to {}', checkpoint.step, path)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointFormatError(f'{self.path}: truncated at offset {self.offset}, '
                                        f'needed {count} bytes, {len(self.data) - self.offset} left')
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))


def _parse_tensor(payload: bytes, path: Path, offset: int) -> np.ndarray:
    reader = _Reader(payload, path)
    try:
        itemsize, ndim = reader.unpack(struct.Struct('<BI'))
        if itemsize not in (4, 8):
            raise CheckpointFormatError(f'{path}: unknown element size {itemsize} '
                                        f'at offset {offset}')
        shape = tuple(reader.unpack(_SECTION_NAME)[0] for _ in range(ndim))
        raw = reader.take(int(np.prod(shape, dtype=np.int64)) * itemsize)
    except CheckpointFormatError as error:
        raise CheckpointFormatError(f'{path}: malformed tensor in section at offset {offset}') \
            from error
    if reader.offset != len(payload):
        raise CheckpointFormatError(f'{path}: trailing bytes in tensor section at offset {offset}')
    dtype = np.float64 if itemsize == 8 else np.float32
    return np.frombuffer(raw, dtype=f'<f{itemsize}').astype(dtype).reshape(shape)


def _read_sections(path: Path) -> Dict[str, Union[dict, np.ndarray]]:
    try:
        data = path.read_bytes()
    except OSError as error:
        raise CheckpointFormatError(f'{path}: cannot read checkpoint ({error})') from error
    reader = _Reader(data, path)
    magic, version, count = reader.unpack(_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f'{path}: bad magic {magic!r} at offset 0')
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f'{path}: unsupported version {version} at offset 4, '
                                    f'expected {CHECKPOINT_VERSION}')

    sections = {}
    for _ in range(count):
        name_length, = reader.unpack(_SECTION_NAME)
        name = reader.take(name_length).decode('utf-8', errors='replace')
        kind, length = reader.unpack(_SECTION_BODY)
        offset = reader.offset
        payload = reader.take(length)
        if kind == SECTION_JSON:
            try:
                sections[name] = json.loads(payload.decode('utf-8'))
            except (UnicodeDecodeError, json.JSONDecodeError) as error:
                raise CheckpointFormatError(f'{path}: malformed JSON section {name} '
                                            f'at offset {offset}') from error
        elif kind == SECTION_TENSOR:
            sections[name] = _parse_tensor(payload, path, offset)
        else:
            raise CheckpointFormatError(f'{path}: unknown section kind {kind} at offset {offset}')
    if reader.offset != len(data):
        raise CheckpointFormatError(f'{path}: trailing bytes at offset {reader.offset}')
    return sections


def _load_basis(sections: dict, prefix: str, total_variance: Optional[float]) -> Optional[PcaBasis]:
    if f'{prefix}/mean' not in sections:
        return None
    return PcaBasis(mean=sections[f'{prefix}/mean'], components=sections[f'{prefix}/components'],
                    variances=sections[f'{prefix}/variances'],
                    total_variance=float(total_variance or 0.0))


def _prefixed(sections: dict, prefix: str) -> Parameters:
    return {name[len(prefix):]: value for name, value in sections.items()
            if name.startswith(prefix)}


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Reads a checkpoint written by save_checkpoint; nothing is returned on a format error
    """
    path = Path(path)
    sections = _read_sections(path)
    try:
        spec = ModelSpec.from_dict(sections['spec'])
        meta = dict(sections['meta'])
        whitening = meta.pop('whitening')
        encoder = InputEncoder(
            kind=meta.pop('encoder'),
            whitening=WhiteningStats(**whitening) if whitening else None,
            input_basis=_load_basis(sections, 'input_basis', meta.pop('input_total_variance')),
        )
        output_basis = _load_basis(sections, 'output_basis', meta.pop('output_total_variance'))
        checkpoint = Checkpoint(spec=spec, params=_prefixed(sections, 'param/'), encoder=encoder,
                                output_basis=output_basis, step=int(meta.pop('step')),
                                epoch=int(meta.pop('epoch')), seed=int(meta.pop('seed')),
                                adam_step=int(meta.pop('adam_step')),
                                adam_first=_prefixed(sections, 'adam_first/'),
                                adam_second=_prefixed(sections, 'adam_second/'), meta=meta)
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointFormatError(f'{path}: missing or malformed metadata ({error})') from error

    for layer in spec.parameter_layers():
        for name, shape in ((f'{layer.name}.weight', layer.weight_shape()),
                            (f'{layer.name}.bias', (layer.n_out,))):
            if name not in checkpoint.params or checkpoint.params[name].shape != shape:
                raise CheckpointFormatError(f'{path}: parameter {name} missing or not {shape}')
    return checkpoint


if __name__ == '__main__':
    print(describe(build('conv', 15000)))
