"""
Command line interface: synth, pca, train, infer, eval, bench, describe
"""
import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from constants import (EFFECTIVE_CONFIG_NAME, IMAGE_PCA_MAX_COMPONENTS, MANIFEST_NAME,
                       MESH_PCA_MAX_COMPONENTS, VARIANCE_FRACTION)
from core_utils.errors import DataError, DimensionError, FaceCaptureError, NumericError, UsageError
from core_utils.formats import read_vtx, write_vtx
from core_utils.frame import FrameDataset
from core_utils.pca import fit_pca
from core_utils.seeding import default_seed
from dataset import SynthConfig, generate_synthetic, prepare_environment, source_images, \
    validate_synth_config, write_dataset
from evaluation import EvaluationPipeline, benchmark_throughput, export_csv, vertex_rmse
from model import build, describe, load_checkpoint, predict
from trainer import TrainConfig, prepare_training, setup_from_checkpoint, train, \
    validate_train_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SYNTH_FLAGS = ('vertex_count', 'latent_dim', 'frames_per_shot', 'splat_sigma',
               'latent_amplitude', 'image_height', 'image_width')
TRAIN_FLAGS = ('model', 'epochs', 'rampdown_epochs', 'minibatch', 'base_lr',
               'validation_fraction', 'width_divisor', 'input_components', 'workers')


class ArgumentParser(argparse.ArgumentParser):
    """
    Reports usage errors as exceptions so they map to exit code 1
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f'{self.prog}: {message}')


@dataclass
class RunConfig:
    """
    Effective configuration of one invocation, echoed into its output directory
    """
    command: str
    seed: Optional[int] = None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / EFFECTIVE_CONFIG_NAME).open('w', encoding='utf-8') as file:
            json.dump(asdict(self), file, indent=4, ensure_ascii=False, separators=(',', ': '))


def _existing(path: str) -> Path:
    if not Path(path).exists():
        raise UsageError(f'Input path does not exist: {path}')
    return Path(path)


def _resolve_seed(args: argparse.Namespace, fallback: int) -> int:
    return args.seed if args.seed is not None else default_seed(fallback)


def _overrides(args: argparse.Namespace, names: Sequence[str]) -> dict:
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def run_synth(args: argparse.Namespace) -> int:
    values = validate_synth_config(args.config).to_dict() if args.config else SynthConfig().to_dict()
    values.update(_overrides(args, SYNTH_FLAGS))
    values['seed'] = _resolve_seed(args, values['seed'])
    config = SynthConfig.from_dict(values)

    output = Path(args.out)
    prepare_environment(output, overwrite=args.overwrite)
    write_dataset(output, generate_synthetic(config))
    RunConfig(command='synth', seed=config.seed, settings=config.to_dict()).save(output)
    return EXIT_OK


def run_pca(args: argparse.Namespace) -> int:
    dataset = FrameDataset.load(_existing(args.dataset))
    targets = dataset.targets().reshape(len(dataset), -1)
    if args.components is not None:
        basis = fit_pca(targets, n_components=args.components)
    else:
        basis = fit_pca(targets, variance_fraction=args.variance_fraction,
                        max_components=MESH_PCA_MAX_COMPONENTS)

    ratios = basis.explained_ratio()
    print(f'{"k":>5}  {"variance":>14}  {"cumulative":>10}')
    for index in range(basis.k):
        print(f'{index + 1:>5}  {basis.variances[index]:>14.6g}  {ratios[index]:>10.6f}')
    print(f'Output basis: {basis.k} components explain {basis.explained_fraction():.6%}')

    settings = {'components': args.components, 'variance_fraction': args.variance_fraction,
                'output_k': basis.k, 'output_explained': basis.explained_fraction()}
    if args.inputs:
        images = source_images(dataset, 'fc').reshape(len(dataset), -1)
        input_basis = fit_pca(images, variance_fraction=args.variance_fraction,
                              max_components=IMAGE_PCA_MAX_COMPONENTS)
        print(f'Input basis: {input_basis.k} components explain '
              f'{input_basis.explained_fraction():.6%}')
        settings.update({'input_k': input_basis.k,
                         'input_explained': input_basis.explained_fraction()})
    if args.out:
        RunConfig(command='pca', inputs={'dataset': args.dataset}, outputs={'out': args.out},
                  settings=settings).save(Path(args.out))
    return EXIT_OK


def _train_config(args: argparse.Namespace) -> TrainConfig:
    config = validate_train_config(args.config) if args.config else TrainConfig()
    values = config.to_dict()
    values.update(_overrides(args, TRAIN_FLAGS))
    values['seed'] = _resolve_seed(args, values['seed'])
    if args.no_augmentation:
        values['augmentation'] = False
    if args.frozen_output_layer:
        values['train_output_layer'] = False
    if args.fc_jitter:
        values['fc_jitter'] = True
    if args.checkpoint_every_epoch:
        values['checkpoint_every_epoch'] = True
    return TrainConfig.from_dict(values)


def run_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    dataset = FrameDataset.load(_existing(args.dataset))
    output = Path(args.out)
    RunConfig(command='train', seed=config.seed,
              inputs={'dataset': args.dataset, 'resume': args.resume},
              outputs={'run': str(output)}, settings=config.to_dict()).save(output)

    if args.resume:
        checkpoint = load_checkpoint(_existing(args.resume))
        report = train(setup_from_checkpoint(checkpoint, dataset, config), config, output,
                       resume=checkpoint)
    else:
        report = train(prepare_training(dataset, config), config, output)
    print(f'Final loss: train {report.final_train_loss:.6g} cm², '
          f'validation {report.final_val_loss:.6g} cm²')
    return EXIT_OK


def run_infer(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(_existing(args.checkpoint))
    dataset = FrameDataset.load(_existing(args.dataset))
    output = Path(args.out)
    output.mkdir(parents=True, exist_ok=True)
    for shot in dataset.shots:
        shot_set = dataset.subset([shot.shot_id])
        images = source_images(shot_set, checkpoint.spec.kind)
        predictions = predict(checkpoint.params, checkpoint.spec, checkpoint.encoder, images)
        write_vtx(output / f'{shot.directory_name}.vtx', predictions)
    RunConfig(command='infer', inputs={'checkpoint': args.checkpoint, 'dataset': args.dataset},
              outputs={'tracks': str(output)}).save(output)
    logger.info('Wrote {} predicted tracks to {}', len(dataset.shots), output)
    return EXIT_OK


def _load_mask(path: Optional[str]) -> Optional[np.ndarray]:
    """
    Mask from a dataset directory, its manifest or a JSON list of 0 / 1 flags
    """
    if path is None:
        return None
    mask_path = _existing(path)
    if mask_path.is_dir():
        mask_path = mask_path / MANIFEST_NAME
    try:
        with mask_path.open(encoding='utf-8') as file:
            values = json.load(file)
    except (OSError, json.JSONDecodeError) as error:
        raise DataError(f'{mask_path}: cannot read mask ({error})') from error
    if isinstance(values, dict):
        values = values.get('mask')
    if not isinstance(values, list):
        raise DataError(f'{mask_path}: no mask list found')
    return np.asarray(values, dtype=bool)


def run_eval(args: argparse.Namespace) -> int:
    output = Path(args.out) if args.out else None
    if args.checkpoint:
        if not args.dataset:
            raise UsageError('eval with --checkpoint also needs --dataset')
        pipeline = EvaluationPipeline(load_checkpoint(_existing(args.checkpoint)),
                                      FrameDataset.load(_existing(args.dataset)))
        summary = pipeline.run(output)
    else:
        if not args.pred or not args.target:
            raise UsageError('eval needs --pred and --target, or --checkpoint and --dataset')
        prediction = read_vtx(_existing(args.pred))
        target = read_vtx(_existing(args.target))
        series = vertex_rmse(prediction, target, _load_mask(args.mask))
        summary = series.summary()
        if output is not None:
            output.mkdir(parents=True, exist_ok=True)
            export_csv(series, output / 'rmse.csv')
    if output is not None:
        RunConfig(command='eval', inputs={key: getattr(args, key) for key in
                                          ('pred', 'target', 'mask', 'checkpoint', 'dataset')},
                  outputs={'out': str(output)}, settings=summary).save(output)
    print(f'RMSE: {summary["rmse_mm"]:.2f} mm over {summary["frames"]} frames')
    return EXIT_OK


def run_bench(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(_existing(args.checkpoint))
    dataset = FrameDataset.load(_existing(args.dataset))
    images = source_images(dataset, checkpoint.spec.kind)[:args.frames]
    report = benchmark_throughput(checkpoint, images, (1, args.batch_size),
                                  end_to_end=args.end_to_end)
    print(json.dumps(report.to_dict(), indent=4))
    if args.out:
        output = Path(args.out)
        output.mkdir(parents=True, exist_ok=True)
        report.save(output / 'bench.json')
        RunConfig(command='bench', inputs={'checkpoint': args.checkpoint, 'dataset': args.dataset},
                  outputs={'out': str(output)},
                  settings={'frames': args.frames, 'batch_size': args.batch_size,
                            'end_to_end': args.end_to_end}).save(output)
    return EXIT_OK


def run_describe(args: argparse.Namespace) -> int:
    if args.checkpoint:
        spec = load_checkpoint(_existing(args.checkpoint)).spec
    else:
        input_shape = (1, args.input_height, args.input_width) if args.model == 'conv' \
            else (args.n_in,)
        spec = build(args.model, args.n_out, input_shape=input_shape,
                     width_divisor=args.width_divisor)
    print(describe(spec))
    return EXIT_OK


def create_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='fcap', description='Face image to mesh vertex regression')
    parser.add_argument('--log-level', default='INFO',
                        choices=('TRACE', 'DEBUG', 'INFO', 'WARNING', 'ERROR'))
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    synth = commands.add_parser('synth', help='generate a synthetic capture dataset')
    synth.add_argument('--out', required=True)
    synth.add_argument('--config')
    synth.add_argument('--overwrite', action='store_true',
                       help='replace a non-empty output directory that holds no dataset')
    synth.add_argument('--seed', type=int)
    synth.add_argument('--vertex-count', type=int)
    synth.add_argument('--latent-dim', type=int)
    synth.add_argument('--frames-per-shot', type=int)
    synth.add_argument('--splat-sigma', type=float)
    synth.add_argument('--latent-amplitude', type=float)
    synth.add_argument('--image-height', type=int)
    synth.add_argument('--image-width', type=int)
    synth.set_defaults(handler=run_synth)

    pca = commands.add_parser('pca', help='fit output and input bases and print variance')
    pca.add_argument('--dataset', required=True)
    pca.add_argument('--components', type=int)
    pca.add_argument('--variance-fraction', type=float, default=VARIANCE_FRACTION)
    pca.add_argument('--inputs', action='store_true', help='also fit the input image basis')
    pca.add_argument('--out')
    pca.set_defaults(handler=run_pca)

    training = commands.add_parser('train', help='train a network')
    training.add_argument('--dataset', required=True)
    training.add_argument('--out', required=True)
    training.add_argument('--config')
    training.add_argument('--seed', type=int)
    training.add_argument('--model', choices=('conv', 'fc'))
    training.add_argument('--epochs', type=int)
    training.add_argument('--rampdown-epochs', type=int)
    training.add_argument('--minibatch', type=int)
    training.add_argument('--base-lr', type=float)
    training.add_argument('--validation-fraction', type=float)
    training.add_argument('--width-divisor', type=int)
    training.add_argument('--input-components', type=int)
    training.add_argument('--workers', type=int)
    training.add_argument('--no-augmentation', action='store_true')
    training.add_argument('--frozen-output-layer', action='store_true')
    training.add_argument('--fc-jitter', action='store_true')
    training.add_argument('--checkpoint-every-epoch', action='store_true')
    training.add_argument('--resume')
    training.set_defaults(handler=run_train)

    infer = commands.add_parser('infer', help='predict vertex tracks for a dataset')
    infer.add_argument('--checkpoint', required=True)
    infer.add_argument('--dataset', required=True)
    infer.add_argument('--out', required=True)
    infer.set_defaults(handler=run_infer)

    evaluate = commands.add_parser('eval', help='per-frame RMSE of predictions against targets')
    evaluate.add_argument('--pred')
    evaluate.add_argument('--target')
    evaluate.add_argument('--mask')
    evaluate.add_argument('--checkpoint')
    evaluate.add_argument('--dataset')
    evaluate.add_argument('--out')
    evaluate.set_defaults(handler=run_eval)

    bench = commands.add_parser('bench', help='online versus batched inference throughput')
    bench.add_argument('--checkpoint', required=True)
    bench.add_argument('--dataset', required=True)
    bench.add_argument('--frames', type=int, default=400)
    bench.add_argument('--batch-size', type=int, default=200)
    bench.add_argument('--end-to-end', action='store_true')
    bench.add_argument('--out')
    bench.set_defaults(handler=run_bench)

    describe_parser = commands.add_parser('describe', help='print the layer table')
    describe_parser.add_argument('--model', choices=('conv', 'fc'), default='conv')
    describe_parser.add_argument('--n-out', type=int, default=15000)
    describe_parser.add_argument('--n-in', type=int, default=3000)
    describe_parser.add_argument('--input-height', type=int, default=240)
    describe_parser.add_argument('--input-width', type=int, default=320)
    describe_parser.add_argument('--width-divisor', type=int, default=1)
    describe_parser.add_argument('--checkpoint')
    describe_parser.set_defaults(handler=run_describe)
    return parser


def exit_code(error: FaceCaptureError) -> int:
    if isinstance(error, (DimensionError, DataError)):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parses the arguments, runs one subcommand and returns its exit code
    """
    try:
        args = create_parser().parse_args(argv)
    except UsageError as error:
        print(error, file=sys.stderr)
        return EXIT_USAGE

    logger.remove()
    logger.add(sys.stderr, level=args.log_level)
    try:
        return args.handler(args)
    except FaceCaptureError as error:
        logger.error('{}: {}', type(error).__name__, error)
        return exit_code(error)


if __name__ == '__main__':
    sys.exit(run())
