#    Copyright 2024 Alexander Koziell-Pipe

#    Licensed under the Apache License, Version 2.0 (the "License");
#    you may not use this file except in compliance with the License.
#    You may obtain a copy of the License at

#        http://www.apache.org/licenses/LICENSE-2.0

#    Unless required by applicable law or agreed to in writing, software
#    distributed under the License is distributed on an "AS IS" BASIS,
#    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#    See the License for the specific language governing permissions and
#    limitations under the License.
"""Command-line interface: ``fsvi train | evaluate | predict | datagen``.

Exit codes are 0 on success, 1 for user errors (bad configuration, data or
checkpoint) and 2 for numerical failures. Errors are reported on stderr as
a single line ``error: <ExceptionClass>: <message>``. Every output file is
written to a temporary name and renamed once complete.
"""
from __future__ import annotations
import argparse
from dataclasses import replace
import logging
import os
from pathlib import Path
import sys
from typing import Sequence

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from fsvi.checkpoint import (
    Checkpoint, CheckpointKind, load_checkpoint, save_checkpoint
)
from fsvi.config import RunConfig, load_run_config
from fsvi.context import Auxiliary, ContextConfig, Monochrome, UniformBox
from fsvi.data import (
    Dataset, Standardization, atomic_write, grid, load_csv, split,
    standardize, synthetic_1d, two_moons, write_csv
)
from fsvi.errors import ConfigError, FactorizationFailed, FSVIError, NegativeKL
from fsvi.evaluation import (
    MetricsReport, PredictiveOutput, evaluate, selective_table_csv
)
from fsvi.neuralnetwork import MlpSpec
from fsvi.objective import Likelihood, LikelihoodKind, PriorSpec
from fsvi.training import (
    AdamHyper, TrainConfig, TrainHistory, train, train_map_ensemble
)

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
THREADS_ENV = 'FSVI_THREADS'
EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions."""

    def error(self, message: str) -> None:
        """Raise instead of exiting."""
        raise ConfigError(f'{self.prog}: {message}')


def _write_frame(frame: pd.DataFrame, path: Path) -> None:
    with atomic_write(path) as handle:
        frame.to_csv(handle, index=False, float_format='%.17g')
    logger.info('Wrote %s', path)


def _write_report(report: MetricsReport, out_dir: Path) -> None:
    """Write ``selective.csv``, then ``metrics.json``.

    ``metrics.json`` is always the last file of a run directory, so its
    presence marks the directory as complete.
    """
    selective_table_csv(report, out_dir / 'selective.csv')
    with atomic_write(out_dir / 'metrics.json') as handle:
        handle.write(report.to_json() + '\n')
    logger.info('Wrote metrics to %s', out_dir)


def _likelihood(config: RunConfig) -> Likelihood:
    if config.task == 'regression':
        return Likelihood(LikelihoodKind.GAUSSIAN_REGRESSION,
                          config.likelihood.noise_variance)
    return Likelihood(LikelihoodKind.CATEGORICAL_SOFTMAX)


def _load_data(config: RunConfig, rng: np.random.Generator
               ) -> tuple[Dataset, Dataset | None, Dataset | None]:
    """Return the raw training, validation and test splits."""
    section = config.data
    if section.generator is not None:
        generator = section.generator
        generator_rng = np.random.default_rng(generator.seed)
        if generator.kind == 'two_moons':
            full = two_moons(generator.n, generator.noise, generator_rng)
        else:
            full = synthetic_1d(generator.kind, generator.n, generator.noise,
                                generator_rng)
    else:
        full = load_csv(section.train, section.target_columns,
                        section.has_header)
    test = None
    test_fraction = section.test_fraction
    if section.test is not None:
        test = load_csv(section.test, section.target_columns,
                        section.has_header)
        test_fraction = 0.0
    validation_fraction = section.validation_fraction
    train_set, val_set, held_out = split(
        full, [1.0 - validation_fraction - test_fraction,
               validation_fraction, test_fraction], rng
    )
    if test is None and len(held_out) > 0:
        test = held_out
    return train_set, val_set if len(val_set) > 0 else None, test


def _context(config: RunConfig, train_set: Dataset,
             stats: Standardization | None) -> ContextConfig:
    section = config.context
    source = section.source
    if source.kind == 'uniform_box':
        if source.bounds == 'empirical':
            box = UniformBox.from_data(train_set.X, source.padding)
        else:
            bounds = np.asarray(source.bounds, dtype=np.float64)
            if stats is not None:
                bounds = ((bounds - stats.x_mean[:, None])
                          / stats.x_scale[:, None])
            box = UniformBox(bounds)
        context_source = box
    elif source.kind == 'monochrome':
        context_source = Monochrome.from_data(train_set.X, source.image_shape)
    else:
        aux = load_csv(source.path, (), source.has_header).X
        if stats is not None:
            aux = stats.transform_X(aux)
        context_source = Auxiliary(aux)
    if context_source.input_dim != train_set.X.shape[1]:
        raise ConfigError('context.source: dimension does not match the '
                          'training inputs.')
    return ContextConfig(context_source, section.num_sets,
                         section.num_points, section.minibatch_mix_fraction)


def _spec(config: RunConfig, train_set: Dataset) -> MlpSpec:
    if config.task == 'regression':
        outputs = train_set.y.shape[1]
    else:
        outputs = config.model.num_classes or int(train_set.labels.max()) + 1
    return MlpSpec.build(train_set.X.shape[1], list(config.model.hidden),
                         outputs, config.model.activation)


def _train_config(config: RunConfig, context: ContextConfig,
                  likelihood: Likelihood) -> TrainConfig:
    section = config.train
    return TrainConfig(
        epochs=section.epochs, batch_size=section.batch_size,
        learning_rate=section.learning_rate,
        adam=AdamHyper(section.adam.beta1, section.adam.beta2,
                       section.adam.eps),
        mc_samples=section.mc_samples,
        linearization_samples=section.linearization_samples,
        linearization_mode=section.linearization_mode,
        kl_scale=section.kl_scale, grad_policy=section.grad_policy,
        seed=config.seed, context=context, likelihood=likelihood,
        prior=PriorSpec(config.prior.variance, policy=config.prior.policy),
        init_sigma=section.init_sigma, schedule=section.schedule,
        cosine_alpha=section.cosine_alpha,
        eval_samples=config.evaluation.samples
    )


def cmd_train(config_path: str, out: str | None = None,
              seed: int | None = None) -> int:
    """Train the configured model and write its artifacts.

    Writes ``checkpoint.fsvi``, ``history.csv``, ``selective.csv`` and,
    last, ``metrics.json`` to the output directory; FSVI runs with a
    validation split also write ``best.fsvi``, the best-validation
    posterior. With
    ``evaluation.ood`` set, the metrics include the AUROC of predictive
    entropy against that dataset.
    """
    config = load_run_config(config_path)
    if seed is not None:
        config = replace(config, seed=seed)
    out_dir = Path(out or config.output_dir)
    split_rng, eval_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence(config.seed).spawn(2))
    likelihood = _likelihood(config)

    train_set, val_set, test_set = _load_data(config, split_rng)
    stats = None
    if config.data.standardize:
        others = [d for d in (val_set, test_set) if d is not None]
        splits, stats = standardize(train_set, others,
                                    targets=likelihood.is_regression)
        train_set, rest = splits[0], iter(splits[1:])
        val_set = None if val_set is None else next(rest)
        test_set = None if test_set is None else next(rest)
    spec = _spec(config, train_set)
    train_config = _train_config(config, _context(config, train_set, stats),
                                 likelihood)
    logger.info('Run %s: %s on %d rows, network %s', config.digest()[:12],
                config.method, len(train_set), spec.layer_sizes)

    digest = config.digest()
    best = None
    if config.method == 'fsvi':
        result = train(spec, (train_set, val_set), train_config)
        history = result.history
        checkpoint = Checkpoint(CheckpointKind.FSVI, spec, likelihood,
                                posterior=result.posterior,
                                config_digest=digest, stats=stats)
        if val_set is not None and result.best_epoch is not None:
            best = replace(checkpoint, posterior=result.best_posterior)
    else:
        ensemble = train_map_ensemble(
            spec, (train_set, val_set), train_config,
            config.train.ensemble_members, config.train.weight_decay
        )
        history = ensemble.history
        checkpoint = Checkpoint(CheckpointKind.MAP_ENSEMBLE, spec,
                                likelihood, members=ensemble.members,
                                config_digest=digest, stats=stats)

    report_set = test_set if test_set is not None else train_set
    if test_set is None:
        logger.warning('No test split; reporting metrics on the training '
                       'split')
    predictive = checkpoint.predictive(report_set.X,
                                       config.evaluation.samples, eval_rng)
    ood_predictive = None
    if config.evaluation.ood is not None:
        ood = load_csv(config.evaluation.ood, (), config.data.has_header)
        ood_predictive = checkpoint.predictive(
            _model_inputs(checkpoint, ood.X), config.evaluation.samples,
            eval_rng
        )
    report = evaluate(predictive, report_set.y, stats, ood_predictive,
                      referral_rates=config.evaluation.referral_rates,
                      bins=config.evaluation.bins)

    save_checkpoint(checkpoint, out_dir / 'checkpoint.fsvi')
    if best is not None:
        save_checkpoint(best, out_dir / 'best.fsvi')
    _write_history(history, out_dir / 'history.csv')
    _write_report(report, out_dir)
    return EXIT_OK


def _write_history(history: TrainHistory, path: Path) -> None:
    _write_frame(history.to_frame(), path)


def _model_inputs(checkpoint: Checkpoint, X: np.ndarray) -> np.ndarray:
    if X.shape[1] != checkpoint.spec.input_dim:
        raise ConfigError(
            f'Data has {X.shape[1]} feature columns, the model expects '
            + f'{checkpoint.spec.input_dim}.'
        )
    if checkpoint.stats is None:
        return X
    return checkpoint.stats.transform_X(X)


def _predict(checkpoint: Checkpoint, X: np.ndarray, samples: int,
             rng: np.random.Generator) -> PredictiveOutput:
    """Return the predictive at raw inputs, in original target units."""
    predictive = checkpoint.predictive(_model_inputs(checkpoint, X),
                                       samples, rng)
    return predictive.unstandardized(checkpoint.stats)


def _load(checkpoint_path: str, config_path: str | None) -> Checkpoint:
    """Load a checkpoint, checking it against a run configuration if given."""
    digest = None
    if config_path is not None:
        digest = load_run_config(config_path).digest()
    return load_checkpoint(checkpoint_path, expected_digest=digest)


def _num_targets(checkpoint: Checkpoint) -> int:
    if checkpoint.likelihood.is_regression:
        return checkpoint.spec.output_dim
    return 1


def cmd_evaluate(checkpoint_path: str, data_path: str,
                 ood_path: str | None = None, out: str = 'evaluation',
                 seed: int = 0, samples: int = 50,
                 has_header: bool = True,
                 config_path: str | None = None) -> int:
    """Evaluate a checkpoint on labelled data, optionally against OOD data.

    Writes ``selective.csv`` and ``metrics.json``; with `ood_path` also
    ``entropy_in.csv`` and ``entropy_out.csv`` with per-point predictive
    entropies. A checkpoint written under a configuration other than
    `config_path` is reported with a warning.
    """
    checkpoint = _load(checkpoint_path, config_path)
    in_rng, out_rng = (np.random.default_rng(s) for s in
                       np.random.SeedSequence(seed).spawn(2))
    targets = list(range(-_num_targets(checkpoint), 0))
    data = load_csv(data_path, targets, has_header)
    predictive = _predict(checkpoint, data.X, samples, in_rng)
    ood_predictive = None
    if ood_path is not None:
        ood = load_csv(ood_path, (), has_header)
        ood_predictive = _predict(checkpoint, ood.X, samples, out_rng)
    report = evaluate(predictive, data.y, ood_predictive=ood_predictive)

    out_dir = Path(out)
    if ood_predictive is not None:
        for name, output in (('entropy_in.csv', predictive),
                             ('entropy_out.csv', ood_predictive)):
            _write_frame(pd.DataFrame({'entropy': output.entropy}),
                         out_dir / name)
    _write_report(report, out_dir)
    return EXIT_OK


def cmd_predict(checkpoint_path: str, input_path: str, out: str,
                seed: int = 0, samples: int = 50,
                has_header: bool = True,
                config_path: str | None = None) -> int:
    """Write the predictive at every row of an unlabelled CSV.

    Regression writes ``mean{q}`` and ``variance{q}`` columns in original
    units; classification writes ``p{q}`` columns and ``entropy``.
    """
    checkpoint = _load(checkpoint_path, config_path)
    inputs = load_csv(input_path, (), has_header)
    predictive = _predict(checkpoint, inputs.X, samples,
                          np.random.default_rng(seed))
    if predictive.likelihood.is_regression:
        columns = {}
        for q in range(predictive.mean.shape[1]):
            columns[f'mean{q}'] = predictive.mean[:, q]
            columns[f'variance{q}'] = predictive.variance[:, q]
    else:
        columns = {f'p{q}': predictive.probs[:, q]
                   for q in range(predictive.probs.shape[1])}
        columns['entropy'] = predictive.entropy
    _write_frame(pd.DataFrame(columns), Path(out))
    return EXIT_OK


def cmd_datagen(kind: str, out: str, n: int = 200, noise: float = 0.1,
                seed: int = 0, bounds: Sequence[float] | None = None,
                points: int = 50) -> int:
    """Write a generated dataset (or evaluation grid) as CSV."""
    rng = np.random.default_rng(seed)
    match kind:
        case 'two_moons':
            dataset = two_moons(n, noise, rng)
        case 'gap_sine':
            dataset = synthetic_1d('gap_sine', n, noise, rng)
        case 'grid':
            if not bounds or len(bounds) % 2:
                raise ConfigError('grid needs --bounds as lo hi pairs.')
            dataset = grid(np.reshape(bounds, (-1, 2)), points)
        case _:
            raise ConfigError(f'Unknown dataset kind {kind!r}.')
    write_csv(dataset, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the ``fsvi`` command."""
    common = _Parser(add_help=False)
    common.add_argument('--threads', type=int, default=None,
                        help=f'cap BLAS threads (default: ${THREADS_ENV})')
    common.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('-v', '--verbose', action='store_true',
                        help='shorthand for --log-level DEBUG')
    common.add_argument('--seed', type=int, default=None)

    parser = _Parser(prog='fsvi', description=(
        'Function-space variational inference for Bayesian MLPs.'
    ))
    commands = parser.add_subparsers(dest='command', required=True,
                                     parser_class=_Parser)

    train_parser = commands.add_parser('train', parents=[common],
                                       help='train from a run configuration')
    train_parser.add_argument('--config', required=True)
    train_parser.add_argument('--out', default=None)

    for name, text in (('evaluate', 'score a checkpoint on labelled data'),
                       ('predict', 'write predictions for unlabelled data')):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument('--checkpoint', required=True)
        sub.add_argument('--data', required=True)
        sub.add_argument('--samples', type=int, default=50)
        sub.add_argument('--config', default=None,
                         help='warn if the checkpoint came from another '
                         'run configuration')
        sub.add_argument('--header', action=argparse.BooleanOptionalAction,
                         default=True, help='CSV inputs have a header row')
        if name == 'evaluate':
            sub.add_argument('--ood', default=None)
            sub.add_argument('--out', default='evaluation')
        else:
            sub.add_argument('--out', required=True)

    datagen = commands.add_parser('datagen', parents=[common],
                                  help='generate a dataset as CSV')
    datagen.add_argument('--kind', required=True,
                         choices=['two_moons', 'gap_sine', 'grid'])
    datagen.add_argument('--n', type=int, default=200)
    datagen.add_argument('--noise', type=float, default=0.1)
    datagen.add_argument('--out', required=True)
    datagen.add_argument('--bounds', type=float, nargs='+', default=None)
    datagen.add_argument('--points', type=int, default=50)
    return parser


def _threads(args: argparse.Namespace) -> int | None:
    if args.threads is not None:
        threads = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError as error:
            raise ConfigError(f'{THREADS_ENV} must be an integer.') from error
    else:
        return None
    if threads < 1:
        raise ConfigError('Thread count must be positive.')
    return threads


def _run(args: argparse.Namespace) -> int:
    seed = 0 if args.seed is None else args.seed
    match args.command:
        case 'train':
            return cmd_train(args.config, args.out, args.seed)
        case 'evaluate':
            return cmd_evaluate(args.checkpoint, args.data, args.ood,
                                args.out, seed, args.samples, args.header,
                                args.config)
        case 'predict':
            return cmd_predict(args.checkpoint, args.data, args.out, seed,
                               args.samples, args.header, args.config)
        case _:
            return cmd_datagen(args.kind, args.out, args.n, args.noise, seed,
                               args.bounds, args.points)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the ``fsvi`` command and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level='DEBUG' if args.verbose else args.log_level,
            format=LOG_FORMAT
        )
        threads = _threads(args)
        with threadpool_limits(limits=threads):
            return _run(args)
    except (FactorizationFailed, NegativeKL) as error:
        print(f'error: {type(error).__name__}: {error}', file=sys.stderr)
        return EXIT_NUMERIC
    except (FSVIError, OSError, ValueError) as error:
        print(f'error: {type(error).__name__}: {error}', file=sys.stderr)
        return EXIT_USER
