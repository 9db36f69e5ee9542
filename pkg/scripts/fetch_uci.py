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
"""Convert a UCI regression table into the CSV layout the benchmark reads.

The datasets used by ``uci_benchmark.py`` (Boston housing, Concrete,
Energy, Wine quality, Yacht and Protein) are distributed by the UCI
Machine Learning Repository, https://archive.ics.uci.edu/. Nothing is
downloaded unless you give a URL; a local file works just as well::

    python scripts/fetch_uci.py SOURCE data/yacht.csv --sep '\\s+' \\
        --target -1

The source table is read with pandas, rows with missing or non-numeric
cells are dropped, and the chosen feature columns followed by the target
column are written with a header row.
"""
from __future__ import annotations
import argparse
import logging
import sys
from typing import Sequence

import numpy as np
import pandas as pd

from fsvi.data import Dataset, write_csv

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the converter."""
    parser = argparse.ArgumentParser(description=__doc__.split('\n')[0])
    parser.add_argument('source', help='URL or path of the raw table.')
    parser.add_argument('out', help='Where to write the converted CSV.')
    parser.add_argument('--sep', default=',',
                        help='Cell separator of the raw table (a regex).')
    parser.add_argument('--header', action='store_true',
                        help='The raw table starts with a header row.')
    parser.add_argument('--target', type=int, default=-1,
                        help='Index of the target column.')
    parser.add_argument('--features', type=int, nargs='*', default=None,
                        help='Indices of the feature columns; default all '
                        'but the target.')
    parser.add_argument('--log-level', default='INFO')
    return parser


def read_table(source: str, sep: str, header: bool) -> pd.DataFrame:
    """Read `source` and keep only fully numeric rows."""
    frame = pd.read_csv(source, sep=sep, header=0 if header else None,
                        engine='python')
    numeric = frame.apply(pd.to_numeric, errors='coerce')
    complete = numeric.dropna()
    dropped = len(numeric) - len(complete)
    if dropped:
        logger.warning('Dropped %d rows with missing or non-numeric cells',
                       dropped)
    return complete


def to_dataset(table: pd.DataFrame, target: int,
               features: Sequence[int] | None) -> Dataset:
    """Pick the feature and target columns of `table`."""
    columns = table.shape[1]
    if not -columns <= target < columns:
        raise ValueError(f'Target column {target} is out of range for '
                         + f'{columns} columns.')
    target = target % columns
    if features is None:
        features = [i for i in range(columns) if i != target]
    values = table.to_numpy(dtype=np.float64)
    return Dataset(values[:, list(features)], values[:, [target]])


def main(argv: Sequence[str] | None = None) -> int:
    """Convert the table and return the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    table = read_table(args.source, args.sep, args.header)
    if table.empty:
        print(f'error: {args.source} has no complete numeric rows',
              file=sys.stderr)
        return 1
    write_csv(to_dataset(table, args.target, args.features), args.out)
    return 0


if __name__ == '__main__':
    sys.exit(main())
