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
"""Desk-scale UCI regression benchmark.

Runs the usual UCI protocol on user-supplied CSV tables: ten random 90/10
train/test splits, features and targets standardized with the training
statistics, and a one-hidden-layer network of 50 units. Prints the mean
and standard error over seeds of the test RMSE and the test
log-likelihood, both in the original target units::

    python scripts/uci_benchmark.py concrete=data/concrete.csv \\
        yacht=data/yacht.csv --header --check

Datasets are named ``name=path``; the last column of each table is the
target. With ``--check``, known datasets are held to loose acceptance
thresholds and the script exits with status 1 if any misses.
"""
from __future__ import annotations
import argparse
from dataclasses import replace
import logging
import sys
from typing import Sequence

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from fsvi.context import ContextConfig, UniformBox
from fsvi.data import Dataset, load_csv, split, standardize
from fsvi.evaluation import evaluate, posterior_predictive
from fsvi.neuralnetwork import MlpSpec
from fsvi.objective import Likelihood, PriorSpec
from fsvi.training import TrainConfig, train, with_seed

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
TEST_FRACTION = 0.1

THRESHOLDS = {
    'concrete': ('rmse', 5.0),
    'yacht': ('rmse', 1.2),
    'energy': ('rmse', 0.7),
    'wine': ('log_likelihood', -1.05),
}
"""Per dataset, a metric and the bound its mean over seeds must meet.

RMSE must not exceed its bound; log-likelihood must not fall below it.
"""


def _dataset_arg(value: str) -> tuple[str, str]:
    name, sep, path = value.partition('=')
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(
            f'expected name=path, got {value!r}'
        )
    return name.lower(), path


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the benchmark."""
    parser = argparse.ArgumentParser(description=__doc__.split('\n')[0])
    parser.add_argument('datasets', nargs='+', type=_dataset_arg,
                        metavar='NAME=PATH', help='CSV tables to benchmark.')
    parser.add_argument('--header', action='store_true',
                        help='The tables start with a header row.')
    parser.add_argument('--seeds', type=int, default=10)
    parser.add_argument('--hidden', type=int, default=50)
    parser.add_argument('--epochs', type=int, default=1000)
    parser.add_argument('--batch-size', type=int, default=100)
    parser.add_argument('--learning-rate', type=float, default=1e-3)
    parser.add_argument('--noise-variance', type=float, default=0.05,
                        help='Observation noise in standardized units.')
    parser.add_argument('--prior-variance', type=float, default=1.0)
    parser.add_argument('--context-points', type=int, default=10)
    parser.add_argument('--context-padding', type=float, default=0.1,
                        help='Widening of the empirical context box.')
    parser.add_argument('--samples', type=int, default=50,
                        help='Predictive samples at test time.')
    parser.add_argument('--threads', type=int, default=None)
    parser.add_argument('--out', default=None,
                        help='Write per-seed results to this CSV.')
    parser.add_argument('--check', action='store_true',
                        help='Apply the acceptance thresholds.')
    parser.add_argument('--log-level', default='WARNING')
    return parser


def run_seed(dataset: Dataset, config: TrainConfig, args: argparse.Namespace,
             seed: int) -> dict[str, float]:
    """Train and evaluate on one random split of `dataset`."""
    split_rng, eval_rng = (np.random.default_rng(s) for s in
                           np.random.SeedSequence(seed).spawn(2))
    train_set, test_set = split(dataset, [1 - TEST_FRACTION, TEST_FRACTION],
                                split_rng)
    (train_set, test_set), stats = standardize(train_set, [test_set])
    spec = MlpSpec.build(train_set.X.shape[1], [args.hidden], 1, 'tanh')
    context = ContextConfig(
        UniformBox.from_data(train_set.X, args.context_padding),
        num_points=args.context_points
    )
    result = train(spec, (train_set, None),
                   with_seed(replace(config, context=context), seed))
    predictive = posterior_predictive(result.posterior, spec, test_set.X,
                                      config.likelihood, args.samples,
                                      eval_rng)
    report = evaluate(predictive, test_set.y, stats)
    return {'seed': seed, 'rmse': report.rmse, 'log_likelihood': -report.nll}


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Return the mean and standard error over seeds, per dataset."""
    grouped = results.groupby('dataset')[['rmse', 'log_likelihood']]
    return grouped.agg(['mean', 'sem'])


def failures(summary: pd.DataFrame) -> list[str]:
    """Return a message for every dataset missing its threshold."""
    messages = []
    for name, (metric, bound) in THRESHOLDS.items():
        if name not in summary.index:
            continue
        value = summary.loc[name, (metric, 'mean')]
        missed = value > bound if metric == 'rmse' else value < bound
        if missed:
            messages.append(f'{name}: mean {metric} {value:.4f} misses '
                            + f'the bound {bound}')
    return messages


def main(argv: Sequence[str] | None = None) -> int:
    """Run the benchmark and return the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        likelihood=Likelihood(noise_variance=args.noise_variance),
        prior=PriorSpec(args.prior_variance)
    )
    rows = []
    with threadpool_limits(limits=args.threads):
        for name, path in args.datasets:
            dataset = load_csv(path, (-1,), args.header)
            for seed in range(args.seeds):
                row = run_seed(dataset, config, args, seed)
                logger.info('%s seed %d: rmse %.4f, ll %.4f', name, seed,
                            row['rmse'], row['log_likelihood'])
                rows.append({'dataset': name, **row})
    results = pd.DataFrame(rows)
    if args.out is not None:
        results.to_csv(args.out, index=False, float_format='%.17g')
    summary = summarize(results)
    print(summary.to_string(float_format=lambda value: f'{value:.4f}'))
    if args.check:
        missed = failures(summary)
        for message in missed:
            print(f'FAIL {message}', file=sys.stderr)
        return 1 if missed else 0
    return 0


if __name__ == '__main__':
    sys.exit(main())
