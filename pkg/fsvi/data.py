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
"""Datasets: synthetic generators, CSV ingestion, standardization, splits.

Every dataset is a pair of row matrices, inputs ``X`` (N x D) and targets
``y`` (N x Q). Classification targets hold class indices in a single
column; evaluation grids have no targets (Q = 0).
"""
from __future__ import annotations
from contextlib import contextmanager
from dataclasses import dataclass
import logging
import math
import os
from pathlib import Path
import re
import tempfile
from typing import Any, Iterator, Sequence

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons

from fsvi.errors import (
    DimensionMismatch, EmptyData, InvalidFractions, ParseError, RaggedRows
)

logger = logging.getLogger(__name__)

GAP_SINE_INTERVALS: tuple[tuple[float, float], ...] = ((-4.0, -1.0),
                                                        (1.0, 4.0))
"""Input intervals of the gap-sine dataset; (-1, 1) is left empty."""
SPLIT_TOLERANCE = 1e-9


@contextmanager
def atomic_write(path: str | os.PathLike, mode: str = 'w'
                 ) -> Iterator[Any]:
    """Open a temporary file next to `path`, renaming it over `path` on exit.

    Nothing is written to `path` if the body raises.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(mode, dir=path.parent,
                                         prefix=f'.{path.name}.',
                                         delete=False)
    try:
        with handle:
            yield handle
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise


@dataclass(frozen=True, eq=False)
class Standardization:
    """Affine feature and target statistics of a training split."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    constant_columns: tuple[int, ...] = ()
    """Feature columns with zero spread, which are centred but not scaled."""

    def transform_X(self, X: np.ndarray) -> np.ndarray:
        """Standardize inputs."""
        return (X - self.x_mean) / self.x_scale

    def transform_y(self, y: np.ndarray) -> np.ndarray:
        """Standardize targets."""
        return (y - self.y_mean) / self.y_scale

    def inverse_y(self, y: np.ndarray) -> np.ndarray:
        """Map standardized targets back to original units."""
        return np.asarray(y) * self.y_scale + self.y_mean

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-serializable description."""
        return {'x_mean': self.x_mean.tolist(),
                'x_scale': self.x_scale.tolist(),
                'y_mean': self.y_mean.tolist(),
                'y_scale': self.y_scale.tolist(),
                'constant_columns': list(self.constant_columns)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Standardization:
        """Inverse of :py:meth:`to_dict`."""
        return cls(np.asarray(data['x_mean'], dtype=np.float64),
                   np.asarray(data['x_scale'], dtype=np.float64),
                   np.asarray(data['y_mean'], dtype=np.float64),
                   np.asarray(data['y_scale'], dtype=np.float64),
                   tuple(data.get('constant_columns', ())))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Inputs and targets, with the statistics used to standardize them."""

    X: np.ndarray
    y: np.ndarray
    stats: Standardization | None = None

    def __post_init__(self) -> None:
        """Check that inputs and targets have matching rows."""
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2:
            raise DimensionMismatch('Inputs must be an N x D matrix.')
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] != X.shape[0]:
            raise DimensionMismatch(
                f'{X.shape[0]} input rows but targets of shape {y.shape}.'
            )
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'y', y)

    def __len__(self) -> int:
        """Return the number of rows."""
        return self.X.shape[0]

    @property
    def labels(self) -> np.ndarray:
        """Return the targets as a vector of integer class labels."""
        if self.y.shape[1] != 1:
            raise DimensionMismatch('Class labels need a single column.')
        labels = self.y[:, 0]
        if not np.array_equal(labels, np.round(labels)):
            raise ValueError('Class labels must be integers.')
        return labels.astype(np.intp)

    def with_rows(self, indices: np.ndarray) -> Dataset:
        """Return the subset of rows `indices`, keeping the statistics."""
        return Dataset(self.X[indices], self.y[indices], self.stats)

    def inverse_targets(self, values: np.ndarray) -> np.ndarray:
        """Map standardized target values back to original units."""
        if self.stats is None:
            return np.asarray(values)
        return self.stats.inverse_y(values)


def two_moons(n: int, noise_sd: float, rng: np.random.Generator) -> Dataset:
    """Generate the interleaved half-circles of the Two Moons problem.

    The upper moon is the unit half-circle about the origin (label 0), the
    lower moon the unit half-circle about ``(1, 0.5)`` (label 1).
    """
    if n < 2:
        raise ValueError('Two Moons needs at least two points.')
    X, y = make_moons(n_samples=n, noise=noise_sd if noise_sd > 0 else None,
                      random_state=int(rng.integers(2 ** 31 - 1)))
    return Dataset(X, y.astype(np.float64))


def synthetic_1d(kind: str, n: int, noise_sd: float,
                 rng: np.random.Generator) -> Dataset:
    """Generate a 1D regression problem with a gap in its inputs.

    For ``kind = 'gap_sine'`` half of the inputs are uniform on
    ``[-4, -1]`` and half on ``[1, 4]``, with targets ``sin(x)`` plus
    Gaussian noise.
    """
    if kind != 'gap_sine':
        raise ValueError(f'Unknown 1D dataset {kind!r}.')
    if n < 2:
        raise ValueError('The 1D dataset needs at least two points.')
    (lo_left, hi_left), (lo_right, hi_right) = GAP_SINE_INTERVALS
    left = rng.uniform(lo_left, hi_left, n // 2)
    right = rng.uniform(lo_right, hi_right, n - n // 2)
    x = np.concatenate([left, right])
    y = np.sin(x)
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None])


def grid(bounds: np.ndarray, points_per_dim: int) -> Dataset:
    """Return a regular grid over a box, without targets.

    Rows enumerate the grid with the last input dimension varying fastest.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
    if points_per_dim < 1:
        raise ValueError('A grid needs at least one point per dimension.')
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing='ij')
    X = np.stack([axis.ravel() for axis in mesh], axis=1)
    return Dataset(X, np.zeros((X.shape[0], 0)))


_LINE = re.compile(r'line (\d+)')


def load_csv(path: str | os.PathLike, target_columns: Sequence[int] = (-1,),
             has_header: bool = False) -> Dataset:
    """Read a numeric CSV table.

    Args:
        path: The file to read.
        target_columns: Column indices holding the targets (negative
                        indices count from the end); all other columns are
                        features.
        has_header: Whether the first line is a header to skip.

    Raises:
        ParseError: If a cell is not a number.
        RaggedRows: If a row has a different number of cells.
    """
    offset = 2 if has_header else 1
    try:
        frame = pd.read_csv(path, header=None, skiprows=1 if has_header else 0,
                            dtype=str, na_filter=False,
                            skip_blank_lines=False)
    except pd.errors.EmptyDataError as error:
        raise ParseError(f'{path} contains no rows.') from error
    except pd.errors.ParserError as error:
        match = _LINE.search(str(error))
        line = int(match.group(1)) if match else None
        raise RaggedRows('Row length differs from the first row.',
                         line) from error

    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise RaggedRows('Row length differs from the first row.',
                         int(np.argmax(short)) + offset)
    values = frame.apply(pd.to_numeric, errors='coerce')
    bad = (values.isna() | ~np.isfinite(values)).to_numpy()
    if bad.any():
        row, column = np.argwhere(bad)[0]
        raise ParseError(
            f'Column {column + 1} holds {frame.iat[row, column]!r}, '
            + 'not a number.', int(row) + offset
        )
    table = values.to_numpy(dtype=np.float64)

    columns = table.shape[1]
    targets = sorted({index % columns for index in target_columns
                      if -columns <= index < columns})
    if len(targets) != len(set(target_columns)):
        raise ParseError(
            f'Target columns {list(target_columns)} do not fit a table with '
            + f'{columns} columns.'
        )
    features = [index for index in range(columns) if index not in targets]
    logger.info('Loaded %d rows from %s', table.shape[0], path)
    return Dataset(table[:, features], table[:, targets])


def write_csv(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write a dataset as CSV with a header row, atomically.

    Columns are named ``x0..x{D-1}`` followed by ``y0..y{Q-1}``.
    """
    columns = ([f'x{i}' for i in range(dataset.X.shape[1])]
               + [f'y{i}' for i in range(dataset.y.shape[1])])
    frame = pd.DataFrame(np.hstack([dataset.X, dataset.y]), columns=columns)
    with atomic_write(path) as handle:
        frame.to_csv(handle, index=False, float_format='%.17g')
    logger.info('Wrote %d rows to %s', len(dataset), path)


def standardize(train: Dataset, others: Sequence[Dataset] = (),
                targets: bool = True
                ) -> tuple[list[Dataset], Standardization]:
    """Standardize every split with the training split's statistics.

    Feature columns with zero spread are centred but left unscaled. Set
    `targets` to False for classification, whose labels stay unchanged.

    Returns:
        datasets: The standardized training split followed by `others`.
        stats: The statistics, also attached to every returned dataset.
    """
    if len(train) == 0:
        raise EmptyData('Cannot standardize an empty training split.')
    x_mean = train.X.mean(axis=0)
    x_scale = train.X.std(axis=0)
    constant = tuple(int(i) for i in np.flatnonzero(x_scale == 0))
    if constant:
        logger.warning('Feature columns %s are constant and left unscaled',
                       list(constant))
        x_scale[list(constant)] = 1.0
    num_targets = train.y.shape[1]
    if targets:
        y_mean = train.y.mean(axis=0)
        y_scale = train.y.std(axis=0)
        y_scale[y_scale == 0] = 1.0
    else:
        y_mean, y_scale = np.zeros(num_targets), np.ones(num_targets)
    stats = Standardization(x_mean, x_scale, y_mean, y_scale, constant)
    standardized = []
    for dataset in (train, *others):
        y = dataset.y
        if y.shape[1] == num_targets:
            y = stats.transform_y(y)
        standardized.append(Dataset(stats.transform_X(dataset.X), y, stats))
    return standardized, stats


def split(dataset: Dataset, fractions: Sequence[float],
          rng: np.random.Generator) -> list[Dataset]:
    """Shuffle the rows and cut them into contiguous pieces.

    Each piece's size differs from its exact fraction of the rows by less
    than one.

    Raises:
        InvalidFractions: If a fraction is negative or they do not sum to 1.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if (fractions.size == 0 or np.any(fractions < 0)
            or abs(fractions.sum() - 1.0) > SPLIT_TOLERANCE):
        raise InvalidFractions(
            f'Fractions {fractions.tolist()} must be non-negative and sum '
            + 'to 1.'
        )
    order = rng.permutation(len(dataset))
    bounds = [int(math.floor(c * len(dataset) + 0.5))
              for c in np.cumsum(fractions)]
    bounds[-1] = len(dataset)
    pieces = np.split(order, bounds[:-1])
    return [dataset.with_rows(piece) for piece in pieces]
