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
"""Tests for checkpoint files."""
import logging

import numpy as np
import pytest

from fsvi.checkpoint import (
    MAGIC, Checkpoint, CheckpointKind, load_checkpoint, save_checkpoint
)
from fsvi.data import Standardization
from fsvi.errors import CheckpointError, CheckpointVersionError
from fsvi.objective import Likelihood, VariationalPosterior


@pytest.fixture
def checkpoint(small_spec, rng):
    posterior = VariationalPosterior(
        rng.standard_normal(small_spec.num_params),
        rng.standard_normal(small_spec.num_params)
    )
    stats = Standardization(rng.standard_normal(2), rng.uniform(1, 2, 2),
                            np.zeros(0), np.ones(0))
    return Checkpoint(CheckpointKind.FSVI, small_spec,
                      Likelihood('categorical_softmax'), posterior,
                      config_digest='abc123', stats=stats)


def test_round_trip_is_bitwise(checkpoint, tmp_path):
    path = tmp_path / 'model.fsvi'
    save_checkpoint(checkpoint, path)
    assert path.read_text().splitlines()[0] == MAGIC
    loaded = load_checkpoint(path)
    assert loaded.kind is CheckpointKind.FSVI
    assert loaded.spec == checkpoint.spec
    assert loaded.likelihood == checkpoint.likelihood
    assert np.array_equal(loaded.posterior.mu, checkpoint.posterior.mu)
    assert np.array_equal(loaded.posterior.rho, checkpoint.posterior.rho)
    assert np.array_equal(loaded.stats.x_scale, checkpoint.stats.x_scale)
    assert loaded.config_digest == 'abc123'


def test_loaded_model_predicts_identically(checkpoint, tmp_path, rng):
    path = tmp_path / 'model.fsvi'
    save_checkpoint(checkpoint, path)
    X = rng.standard_normal((4, 2))
    before = checkpoint.predictive(X, 5, np.random.default_rng(0))
    after = load_checkpoint(path).predictive(X, 5, np.random.default_rng(0))
    assert np.array_equal(before.probs, after.probs)


def test_ensemble_checkpoint(small_spec, rng, tmp_path):
    members = tuple(rng.standard_normal(small_spec.num_params)
                    for _ in range(2))
    checkpoint = Checkpoint(CheckpointKind.MAP_ENSEMBLE, small_spec,
                            Likelihood(noise_variance=0.5), members=members)
    path = tmp_path / 'ensemble.fsvi'
    save_checkpoint(checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.posterior is None
    assert all(np.array_equal(a, b)
               for a, b in zip(loaded.members, members))
    assert loaded.predictive(rng.standard_normal((3, 2)), 1,
                             rng).mean.shape == (3, 2)


def test_wrong_parameters_are_rejected(small_spec):
    with pytest.raises(CheckpointError):
        Checkpoint(CheckpointKind.FSVI, small_spec, Likelihood())
    with pytest.raises(CheckpointError):
        Checkpoint(CheckpointKind.MAP_ENSEMBLE, small_spec, Likelihood(),
                   members=(np.zeros(3),))


def test_bad_magic(tmp_path):
    path = tmp_path / 'model.fsvi'
    path.write_text('FSVI0\n{}\n')
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_corrupt_payload(checkpoint, tmp_path):
    path = tmp_path / 'model.fsvi'
    save_checkpoint(checkpoint, path)
    text = path.read_text()
    path.write_text(text[:len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text(MAGIC + '\n{"kind": "fsvi"}\n')
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_digest_mismatch_warns(checkpoint, tmp_path, caplog):
    path = tmp_path / 'model.fsvi'
    save_checkpoint(checkpoint, path)
    with caplog.at_level(logging.WARNING, logger='fsvi.checkpoint'):
        load_checkpoint(path, expected_digest='abc123')
        assert caplog.text == ''
        load_checkpoint(path, expected_digest='other')
    assert 'different configuration' in caplog.text
