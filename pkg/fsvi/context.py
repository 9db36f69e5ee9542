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
"""Context distributions: where the function-space KL is evaluated.

A context distribution is sampled afresh at every optimization step. Three
sources are available: a uniform box over input space, monochrome images
built from the training pixels, and rows of an auxiliary dataset. Any
fraction of each context set can instead be drawn from the current
mini-batch.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import math
from typing import Protocol

import numpy as np

from fsvi.errors import DimensionMismatch, EmptyData, EmptyPool

logger = logging.getLogger(__name__)


class ContextSource(Protocol):
    """Anything that can draw context points."""

    @property
    def input_dim(self) -> int:
        """Return the dimension D of the points it draws."""
        ...

    def sample(self, num_points: int,
               rng: np.random.Generator) -> np.ndarray:
        """Draw a `num_points` x D matrix of context points."""
        ...


def empirical_bounds(X: np.ndarray) -> np.ndarray:
    """Return per-dimension ``[lo, hi]`` bounds of the rows of `X`.

    Returns:
        bounds: A D x 2 array of column-wise minima and maxima.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyData('Cannot compute bounds of an empty dataset.')
    return np.stack([X.min(axis=0), X.max(axis=0)], axis=1)


def sample_uniform_box(bounds: np.ndarray, num_points: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw points uniformly from an axis-aligned box."""
    bounds = np.asarray(bounds, dtype=np.float64)
    return rng.uniform(bounds[:, 0], bounds[:, 1],
                       size=(num_points, bounds.shape[0]))


def monochrome_pool(X_train: np.ndarray,
                    image_shape: tuple[int, ...]) -> list[np.ndarray]:
    """Collect every pixel value of every training image, per channel.

    Images are rows of `X_train`, flattened channel-major with
    ``image_shape = (channels, height, width)``.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    channels = image_shape[0]
    if X_train.ndim != 2 or X_train.shape[1] != math.prod(image_shape):
        raise DimensionMismatch(
            f'Rows of shape {X_train.shape[1:]} are not images of shape '
            + f'{image_shape}.'
        )
    per_channel = X_train.reshape(X_train.shape[0], channels, -1)
    return [per_channel[:, channel, :].ravel()
            for channel in range(channels)]


def sample_monochrome(pool: list[np.ndarray], image_shape: tuple[int, ...],
                      num_points: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw images whose channels are each filled with one pooled pixel.

    For every sample and channel a pixel value is drawn uniformly from that
    channel's pool and copied to the whole channel.
    """
    if len(pool) != image_shape[0]:
        raise DimensionMismatch(
            f'{len(pool)} pixel pools for {image_shape[0]} channels.'
        )
    if any(len(channel) == 0 for channel in pool):
        raise EmptyPool('Every channel needs at least one pixel value.')
    pixels_per_channel = math.prod(image_shape[1:])
    values = np.stack(
        [np.asarray(channel)[rng.integers(0, len(channel), size=num_points)]
         for channel in pool], axis=1
    )
    return np.repeat(values, pixels_per_channel, axis=1)


def sample_auxiliary(X_aux: np.ndarray, num_points: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw rows of an auxiliary dataset, without replacement if possible."""
    if X_aux.shape[0] == 0:
        raise EmptyData('The auxiliary dataset is empty.')
    replace = num_points > X_aux.shape[0]
    return X_aux[rng.choice(X_aux.shape[0], num_points, replace=replace)]


@dataclass(frozen=True, eq=False)
class UniformBox:
    """Uniform distribution over an axis-aligned box."""

    bounds: np.ndarray
    """D x 2 array of ``[lo, hi]`` per dimension."""

    def __post_init__(self) -> None:
        """Check that the bounds are finite and ordered."""
        bounds = np.array(self.bounds, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(bounds)):
            raise ValueError('Context bounds must be finite.')
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValueError('Context bounds need lo <= hi.')
        bounds.setflags(write=False)
        object.__setattr__(self, 'bounds', bounds)

    @classmethod
    def from_data(cls, X_train: np.ndarray,
                  padding: float = 0.0) -> UniformBox:
        """Use the empirical bounds, widened by `padding` times the range."""
        bounds = empirical_bounds(X_train)
        width = bounds[:, 1] - bounds[:, 0]
        return cls(bounds + padding * np.stack([-width, width], axis=1))

    @property
    def input_dim(self) -> int:
        """Return D."""
        return self.bounds.shape[0]

    def sample(self, num_points: int,
               rng: np.random.Generator) -> np.ndarray:
        """Draw uniform points from the box."""
        return sample_uniform_box(self.bounds, num_points, rng)


@dataclass(frozen=True, eq=False)
class Monochrome:
    """Uniform distribution over channel-constant images."""

    image_shape: tuple[int, ...]
    pool: list[np.ndarray]

    @classmethod
    def from_data(cls, X_train: np.ndarray,
                  image_shape: tuple[int, ...]) -> Monochrome:
        """Build the pixel pools from training images."""
        image_shape = tuple(image_shape)
        return cls(image_shape, monochrome_pool(X_train, image_shape))

    @property
    def input_dim(self) -> int:
        """Return D."""
        return math.prod(self.image_shape)

    def sample(self, num_points: int,
               rng: np.random.Generator) -> np.ndarray:
        """Draw monochrome images."""
        return sample_monochrome(self.pool, self.image_shape, num_points,
                                 rng)


@dataclass(frozen=True, eq=False)
class Auxiliary:
    """Rows of an auxiliary, unlabelled dataset."""

    X: np.ndarray

    def __post_init__(self) -> None:
        """Check that the dataset has rows."""
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise EmptyData('The auxiliary dataset is empty.')
        object.__setattr__(self, 'X', X)

    @property
    def input_dim(self) -> int:
        """Return D."""
        return self.X.shape[1]

    def sample(self, num_points: int,
               rng: np.random.Generator) -> np.ndarray:
        """Draw auxiliary rows."""
        return sample_auxiliary(self.X, num_points, rng)


@dataclass(frozen=True, eq=False)
class ContextConfig:
    """How context sets are drawn at each step."""

    source: ContextSource
    num_sets: int = 1
    """S, the number of context sets per step."""
    num_points: int = 10
    """K, the number of points per context set."""
    minibatch_mix_fraction: float = 0.0
    """Fraction of each set drawn from the current mini-batch."""

    def __post_init__(self) -> None:
        """Validate the configuration."""
        if int(self.num_sets) < 1 or int(self.num_points) < 1:
            raise ValueError('Need at least one context set and point.')
        if not 0.0 <= float(self.minibatch_mix_fraction) <= 1.0:
            raise ValueError('Mini-batch fraction must lie in [0, 1].')

    @property
    def num_minibatch_points(self) -> int:
        """Return round-half-up(mix * K), the mini-batch rows per set."""
        return int(math.floor(self.minibatch_mix_fraction * self.num_points
                              + 0.5))


@dataclass(frozen=True, eq=False)
class ContextBatch:
    """S context sets of K points each."""

    sets: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        """Check that every set has the same shape."""
        sets = tuple(np.asarray(X, dtype=np.float64) for X in self.sets)
        if sets and any(X.ndim != 2 or X.shape != sets[0].shape
                        for X in sets):
            raise DimensionMismatch('All context sets must be K x D.')
        object.__setattr__(self, 'sets', sets)

    def __len__(self) -> int:
        """Return the number of context sets."""
        return len(self.sets)


def assemble_contexts(config: ContextConfig, minibatch_X: np.ndarray | None,
                      rng: np.random.Generator) -> ContextBatch:
    """Draw a batch of context sets for one optimization step.

    Each set holds ``round(mix * K)`` mini-batch rows (without replacement
    unless the batch is too small) followed by the remaining rows from the
    configured source.
    """
    from_batch = config.num_minibatch_points
    from_source = config.num_points - from_batch
    if from_batch > 0:
        if minibatch_X is None or len(minibatch_X) == 0:
            raise EmptyData('Mini-batch mixing needs a non-empty mini-batch.')
        minibatch_X = np.asarray(minibatch_X, dtype=np.float64)
        if minibatch_X.shape[1] != config.source.input_dim:
            raise DimensionMismatch(
                'Mini-batch and context source dimensions differ.'
            )
        replace = from_batch > minibatch_X.shape[0]
        if replace:
            logger.warning('Drawing %d context points with replacement from '
                           'a mini-batch of %d', from_batch,
                           minibatch_X.shape[0])
    sets = []
    for _ in range(config.num_sets):
        parts = []
        if from_batch > 0:
            rows = rng.choice(minibatch_X.shape[0], from_batch,
                              replace=replace)
            parts.append(minibatch_X[rows])
        if from_source > 0:
            parts.append(config.source.sample(from_source, rng))
        sets.append(np.concatenate(parts, axis=0))
    return ContextBatch(tuple(sets))
