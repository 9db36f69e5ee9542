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
"""End-to-end tests of the ``fsvi`` command."""
import json

import pandas as pd
import pytest

from fsvi import cli
from fsvi.checkpoint import MAGIC
from fsvi.errors import FactorizationFailed


def run(*argv):
    return cli.main([str(arg) for arg in argv])


def write_config(path, **overrides):
    config = {
        'schema_version': 1,
        'task': 'regression',
        'model': {'hidden': [8]},
        'data': {'generator': {'kind': 'gap_sine', 'n': 40}},
        'train': {'epochs': 2, 'batch_size': 16, 'mc_samples': 2},
        'likelihood': {'noise_variance': 0.01},
        'context': {'num_points': 5},
        'evaluation': {'samples': 5},
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return path


@pytest.fixture
def moons_run(tmp_path):
    """Train a small Two Moons classifier and return its directory."""
    config = write_config(
        tmp_path / 'moons.json', task='classification',
        data={'generator': {'kind': 'two_moons', 'n': 60},
              'test_fraction': 0.2},
        context={'source': {'kind': 'uniform_box',
                            'bounds': [[-3, 3], [-3, 3]]},
                 'num_points': 5, 'num_sets': 2},
    )
    out = tmp_path / 'moons'
    assert run('train', '--config', config, '--out', out) == 0
    return out


def test_datagen_two_moons(tmp_path):
    out = tmp_path / 'moons.csv'
    assert run('datagen', '--kind', 'two_moons', '--n', 200, '--out',
               out) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['x0', 'x1', 'y0']
    assert len(frame) == 200
    again = tmp_path / 'again.csv'
    run('datagen', '--kind', 'two_moons', '--n', 200, '--out', again)
    assert out.read_bytes() == again.read_bytes()
    other = tmp_path / 'other.csv'
    run('datagen', '--kind', 'two_moons', '--n', 200, '--seed', 1, '--out',
        other)
    assert out.read_bytes() != other.read_bytes()


def test_datagen_gap_sine_and_grid(tmp_path):
    sine = tmp_path / 'sine.csv'
    assert run('datagen', '--kind', 'gap_sine', '--n', 50, '--out',
               sine) == 0
    x = pd.read_csv(sine)['x0']
    assert not ((x > -1) & (x < 1)).any()
    points = tmp_path / 'grid.csv'
    assert run('datagen', '--kind', 'grid', '--bounds', -1, 1, -2, 2,
               '--points', 3, '--out', points) == 0
    assert pd.read_csv(points).shape == (9, 2)


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run('datagen', '--kind', 'grid', '--bounds', -1, '--out',
               tmp_path / 'grid.csv') == 1
    assert 'error: ConfigError' in capsys.readouterr().err
    assert run('datagen', '--kind', 'spiral', '--out',
               tmp_path / 'x.csv') == 1
    assert run('train') == 1
    assert not (tmp_path / 'grid.csv').exists()


def test_thread_variable_must_be_an_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv('FSVI_THREADS', 'many')
    assert run('datagen', '--kind', 'two_moons', '--out',
               tmp_path / 'moons.csv') == 1
    assert 'FSVI_THREADS' in capsys.readouterr().err


def test_train_regression_writes_artifacts(tmp_path):
    config = write_config(tmp_path / 'run.json',
                          data={'generator': {'kind': 'gap_sine', 'n': 40},
                                'test_fraction': 0.25})
    out = tmp_path / 'run'
    assert run('train', '--config', config, '--out', out) == 0
    for name in ('checkpoint.fsvi', 'best.fsvi', 'history.csv',
                 'metrics.json', 'selective.csv'):
        assert (out / name).exists()
    history = pd.read_csv(out / 'history.csv')
    # 40 rows less 10% validation and 25% test leave 26: two steps per epoch.
    assert len(history) == 4
    assert (history['fkl'] >= 0).all()
    metrics = json.loads((out / 'metrics.json').read_text())
    assert {'nll', 'rmse', 'mean_entropy'} <= set(metrics)
    assert 'accuracy' not in metrics


def test_train_is_reproducible(tmp_path):
    config = write_config(tmp_path / 'run.json')
    first, second = tmp_path / 'first', tmp_path / 'second'
    run('train', '--config', config, '--out', first)
    run('train', '--config', config, '--out', second)
    for name in ('history.csv', 'checkpoint.fsvi', 'metrics.json'):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_map_ensemble_method(tmp_path):
    config = write_config(tmp_path / 'run.json', method='map_ensemble',
                          train={'epochs': 1, 'batch_size': 16,
                                 'ensemble_members': 2})
    out = tmp_path / 'run'
    assert run('train', '--config', config, '--out', out) == 0
    assert not (out / 'best.fsvi').exists()
    payload = json.loads((out / 'checkpoint.fsvi').read_text().splitlines()[1])
    assert payload['kind'] == 'map_ensemble'
    assert len(payload['params']['members']) == 2


def test_malformed_config_writes_nothing(tmp_path, capsys):
    config = write_config(tmp_path / 'run.json', train={'epochz': 2})
    out = tmp_path / 'run'
    assert run('train', '--config', config, '--out', out) == 1
    assert 'train.epochz: unknown key' in capsys.readouterr().err
    assert not out.exists()


def test_numerical_failure_exits_two(tmp_path, monkeypatch, capsys):
    def failing_train(*args, **kwargs):
        raise FactorizationFailed(5, 1e-4, context_index=1)

    monkeypatch.setattr(cli, 'train', failing_train)
    config = write_config(tmp_path / 'run.json')
    assert run('train', '--config', config, '--out', tmp_path / 'run') == 2
    assert 'error: FactorizationFailed' in capsys.readouterr().err


def test_evaluate_with_and_without_ood(moons_run, tmp_path):
    data = tmp_path / 'moons.csv'
    run('datagen', '--kind', 'two_moons', '--n', 30, '--seed', 7, '--out',
        data)
    ood = tmp_path / 'far.csv'
    run('datagen', '--kind', 'grid', '--bounds', 5, 6, 5, 6, '--points', 3,
        '--out', ood)

    plain = tmp_path / 'plain'
    assert run('evaluate', '--checkpoint', moons_run / 'checkpoint.fsvi',
               '--data', data, '--out', plain) == 0
    metrics = json.loads((plain / 'metrics.json').read_text())
    assert 'auroc' not in metrics
    assert 0.0 <= metrics['accuracy'] <= 1.0

    with_ood = tmp_path / 'with_ood'
    assert run('evaluate', '--checkpoint', moons_run / 'checkpoint.fsvi',
               '--data', data, '--ood', ood, '--out', with_ood) == 0
    metrics = json.loads((with_ood / 'metrics.json').read_text())
    assert 0.0 <= metrics['auroc'] <= 1.0
    assert len(pd.read_csv(with_ood / 'entropy_in.csv')) == 30
    assert len(pd.read_csv(with_ood / 'entropy_out.csv')) == 9


def test_predict(moons_run, tmp_path):
    inputs = tmp_path / 'inputs.csv'
    inputs.write_text('x0,x1\n0.5,0.25\n')
    out = tmp_path / 'predictions.csv'
    assert run('predict', '--checkpoint', moons_run / 'checkpoint.fsvi',
               '--data', inputs, '--out', out) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['p0', 'p1', 'entropy']
    assert len(frame) == 1
    assert frame['p0'][0] + frame['p1'][0] == pytest.approx(1.0)
    again = tmp_path / 'again.csv'
    run('predict', '--checkpoint', moons_run / 'checkpoint.fsvi', '--data',
        inputs, '--out', again)
    assert out.read_bytes() == again.read_bytes()


def test_corrupt_checkpoint_exits_one(tmp_path, capsys):
    checkpoint = tmp_path / 'model.fsvi'
    checkpoint.write_text(MAGIC + '\n{"kind": \n')
    inputs = tmp_path / 'inputs.csv'
    inputs.write_text('x0,x1\n0.5,0.25\n')
    assert run('predict', '--checkpoint', checkpoint, '--data', inputs,
               '--out', tmp_path / 'out.csv') == 1
    assert 'error: CheckpointError' in capsys.readouterr().err
    assert not (tmp_path / 'out.csv').exists()


def test_train_reports_auroc_against_configured_ood(tmp_path):
    run('datagen', '--kind', 'grid', '--bounds', 5, 6, 5, 6, '--points', 3,
        '--out', tmp_path / 'far.csv')
    config = write_config(
        tmp_path / 'moons.json', task='classification',
        data={'generator': {'kind': 'two_moons', 'n': 60},
              'test_fraction': 0.2},
        evaluation={'samples': 5, 'ood': 'far.csv'},
    )
    out = tmp_path / 'run'
    assert run('train', '--config', config, '--out', out) == 0
    metrics = json.loads((out / 'metrics.json').read_text())
    assert 0.0 <= metrics['auroc'] <= 1.0


def test_config_mismatch_is_reported(moons_run, tmp_path, caplog):
    inputs = tmp_path / 'inputs.csv'
    inputs.write_text('x0,x1\n0.5,0.25\n')
    checkpoint = moons_run / 'checkpoint.fsvi'
    assert run('predict', '--checkpoint', checkpoint, '--data', inputs,
               '--config', tmp_path / 'moons.json', '--out',
               tmp_path / 'same.csv') == 0
    assert 'different configuration' not in caplog.text

    other = write_config(tmp_path / 'other.json')
    assert run('predict', '--checkpoint', checkpoint, '--data', inputs,
               '--config', other, '--out', tmp_path / 'other.csv') == 0
    assert 'different configuration' in caplog.text


@pytest.mark.parametrize('failing', ['_write_history', 'selective_table_csv'])
def test_interrupted_train_leaves_no_metrics(tmp_path, monkeypatch, failing):
    def fail(*args, **kwargs):
        raise OSError('disk full')

    monkeypatch.setattr(cli, failing, fail)
    config = write_config(tmp_path / 'run.json')
    out = tmp_path / 'run'
    assert run('train', '--config', config, '--out', out) == 1
    assert (out / 'checkpoint.fsvi').exists()
    assert not (out / 'metrics.json').exists()


def test_package_exports_public_api():
    import fsvi
    from fsvi.objective import elbo_grad

    assert fsvi.elbo_grad is elbo_grad
    for name in fsvi.__all__:
        assert getattr(fsvi, name) is not None
