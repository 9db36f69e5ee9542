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
"""Versioned text checkpoints of trained models.

A checkpoint is two lines: the magic header ``FSVI1`` and a JSON object
holding the architecture, likelihood, parameters, the digest of the run
configuration and the standardization statistics. Floats are written with
their shortest round-tripping representation, so a loaded model is
bitwise identical to the saved one.
"""
from __future__ import annotations
from dataclasses import dataclass
from enum import StrEnum
import json
import logging
import os
from typing import Any

import numpy as np

from fsvi.data import Standardization, atomic_write
from fsvi.errors import CheckpointError, CheckpointVersionError
from fsvi.evaluation import PredictiveOutput, posterior_predictive
from fsvi.neuralnetwork import MlpSpec
from fsvi.objective import Likelihood, VariationalPosterior
from fsvi.training import MapEnsemble

logger = logging.getLogger(__name__)

MAGIC = 'FSVI1'


class CheckpointKind(StrEnum):
    """The kind of model a checkpoint holds."""

    FSVI = 'fsvi'
    MAP_ENSEMBLE = 'map_ensemble'


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """A trained model with everything needed to evaluate it."""

    kind: CheckpointKind
    spec: MlpSpec
    likelihood: Likelihood
    posterior: VariationalPosterior | None = None
    members: tuple[np.ndarray, ...] = ()
    config_digest: str = ''
    stats: Standardization | None = None

    def __post_init__(self) -> None:
        """Check that the parameters match the kind and architecture."""
        object.__setattr__(self, 'kind', CheckpointKind(self.kind))
        num_params = self.spec.num_params
        if self.kind is CheckpointKind.FSVI:
            if self.posterior is None or self.posterior.mu.shape != (
                    num_params,):
                raise CheckpointError(
                    f'An FSVI checkpoint needs a posterior over {num_params} '
                    + 'parameters.'
                )
        elif not self.members or any(np.shape(m) != (num_params,)
                                     for m in self.members):
            raise CheckpointError(
                f'An ensemble checkpoint needs members of {num_params} '
                + 'parameters.'
            )

    def predictive(self, X: np.ndarray, num_samples: int,
                   rng: np.random.Generator) -> PredictiveOutput:
        """Return the model's predictive at the rows of `X`."""
        if self.kind is CheckpointKind.FSVI:
            return posterior_predictive(self.posterior, self.spec, X,
                                        self.likelihood, num_samples, rng)
        return MapEnsemble(self.spec, self.members).predictive(
            X, self.likelihood
        )

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON payload."""
        payload = {'kind': str(self.kind), 'spec': self.spec.to_dict(),
                   'likelihood': self.likelihood.to_dict(),
                   'config_digest': self.config_digest,
                   'stats': None if self.stats is None
                   else self.stats.to_dict()}
        if self.kind is CheckpointKind.FSVI:
            payload['params'] = {'mu': self.posterior.mu.tolist(),
                                 'rho': self.posterior.rho.tolist()}
        else:
            payload['params'] = {'members': [np.asarray(m).tolist()
                                            for m in self.members]}
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> Checkpoint:
        """Inverse of :py:meth:`to_dict`."""
        kind = CheckpointKind(payload['kind'])
        params = payload['params']
        posterior, members = None, ()
        if kind is CheckpointKind.FSVI:
            posterior = VariationalPosterior(np.asarray(params['mu']),
                                             np.asarray(params['rho']))
        else:
            members = tuple(np.asarray(m, dtype=np.float64)
                            for m in params['members'])
        stats = payload.get('stats')
        return cls(kind, MlpSpec.from_dict(payload['spec']),
                   Likelihood(**payload['likelihood']), posterior, members,
                   payload.get('config_digest', ''),
                   None if stats is None else Standardization.from_dict(stats))


def save_checkpoint(checkpoint: Checkpoint,
                    path: str | os.PathLike) -> None:
    """Write `checkpoint` to `path`, atomically."""
    with atomic_write(path) as handle:
        handle.write(MAGIC + '\n')
        json.dump(checkpoint.to_dict(), handle)
        handle.write('\n')
    logger.info('Saved %s checkpoint to %s', checkpoint.kind, path)


def load_checkpoint(path: str | os.PathLike,
                    expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint written by :py:func:`save_checkpoint`.

    A digest different from `expected_digest` is logged as a warning.

    Raises:
        CheckpointVersionError: If the magic header is not ``FSVI1``.
        CheckpointError: If the payload is malformed.
    """
    with open(path, encoding='utf-8', errors='replace') as handle:
        header = handle.readline().rstrip('\n')
        if header != MAGIC:
            raise CheckpointVersionError(
                f'{path} starts with {header[:16]!r}, expected {MAGIC!r}.'
            )
        body = handle.read()
    try:
        checkpoint = Checkpoint.from_dict(json.loads(body))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
        if isinstance(error, CheckpointError):
            raise
        raise CheckpointError(f'{path} is corrupt: {error}') from error
    if expected_digest is not None and expected_digest != (
            checkpoint.config_digest):
        logger.warning('Checkpoint %s was written by a different '
                       'configuration', path)
    return checkpoint
