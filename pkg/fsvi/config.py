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
"""JSON run configurations for the command-line interface.

A run configuration is a JSON object with ``"schema_version": 1`` and the
sections of :py:class:`RunConfig`. Every section is optional and filled
with defaults; unknown keys at any depth are rejected. A minimal Two Moons
configuration is::

    {
        "schema_version": 1,
        "task": "classification",
        "data": {"generator": {"kind": "two_moons", "n": 200}},
        "context": {"source": {"kind": "uniform_box",
                               "bounds": [[-10, 10], [-10, 10]]}}
    }
"""
from __future__ import annotations
from dataclasses import MISSING, asdict, dataclass, field, fields
import hashlib
import json
import os
from pathlib import Path
import types
import typing
from typing import Any, Literal

from fsvi.errors import ConfigError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelSection:
    """Hidden layers of the MLP; input and output sizes come from data."""

    hidden: tuple[int, ...] = (50,)
    activation: Literal['tanh', 'relu', 'identity'] = 'tanh'
    num_classes: int | None = None
    """Number of classes; inferred from the training labels if omitted."""


@dataclass(frozen=True)
class GeneratorSection:
    """A synthetic dataset drawn instead of reading a file."""

    kind: Literal['two_moons', 'gap_sine'] = 'two_moons'
    n: int = 200
    noise: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    """Where the training, test and auxiliary data come from."""

    train: str | None = None
    generator: GeneratorSection | None = None
    test: str | None = None
    target_columns: tuple[int, ...] = (-1,)
    has_header: bool = True
    standardize: bool = True
    validation_fraction: float = 0.1
    test_fraction: float = 0.0
    """Fraction of the training data held out for testing when `test` is
    not given."""


@dataclass(frozen=True)
class AdamSection:
    """Adam decay rates and epsilon."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainSection:
    """Optimization settings."""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam: AdamSection = field(default_factory=AdamSection)
    mc_samples: int = 5
    linearization_samples: int = 1
    linearization_mode: Literal['exact', 'mc_partition'] = 'mc_partition'
    kl_scale: float = 1.0
    grad_policy: Literal['stop_grad_jacobian',
                         'exact_small_net'] = 'stop_grad_jacobian'
    init_sigma: float = 1e-3
    schedule: Literal['constant', 'cosine'] = 'constant'
    cosine_alpha: float = 0.05
    ensemble_members: int = 5
    weight_decay: float = 0.1


@dataclass(frozen=True)
class PriorSection:
    """The isotropic Gaussian prior."""

    variance: float = 1.0
    policy: Literal['prior_mean',
                    'shared_variational_mean'] = 'shared_variational_mean'


@dataclass(frozen=True)
class LikelihoodSection:
    """Observation noise for regression."""

    noise_variance: float = 1.0


@dataclass(frozen=True)
class SourceSection:
    """The distribution the non-mini-batch context points come from.

    ``uniform_box`` uses `bounds`, either a list of ``[lo, hi]`` pairs or
    ``"empirical"`` (widened by `padding`); ``monochrome`` uses
    `image_shape`; ``auxiliary`` reads the CSV at `path`.
    """

    kind: Literal['uniform_box', 'monochrome', 'auxiliary'] = 'uniform_box'
    bounds: tuple[tuple[float, float], ...] | Literal['empirical'] = (
        'empirical'
    )
    padding: float = 0.0
    image_shape: tuple[int, ...] | None = None
    path: str | None = None
    has_header: bool = False


@dataclass(frozen=True)
class ContextSection:
    """How context sets are drawn."""

    source: SourceSection = field(default_factory=SourceSection)
    num_sets: int = 1
    num_points: int = 10
    minibatch_mix_fraction: float = 0.0


@dataclass(frozen=True)
class EvaluationSection:
    """What the final report covers."""

    ood: str | None = None
    referral_rates: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    samples: int = 50
    bins: int = 10


@dataclass(frozen=True)
class RunConfig:
    """A complete, validated run configuration."""

    schema_version: int
    task: Literal['regression', 'classification'] = 'regression'
    method: Literal['fsvi', 'map_ensemble'] = 'fsvi'
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    prior: PriorSection = field(default_factory=PriorSection)
    likelihood: LikelihoodSection = field(default_factory=LikelihoodSection)
    context: ContextSection = field(default_factory=ContextSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output_dir: str = 'runs/latest'
    seed: int = 0

    def __post_init__(self) -> None:
        """Check the values the type system cannot."""
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f'schema_version: expected {SCHEMA_VERSION}, '
                + f'got {self.schema_version}.'
            )
        if (self.data.train is None) == (self.data.generator is None):
            raise ConfigError(
                'data: give exactly one of "train" and "generator".'
            )
        source = self.context.source
        if source.kind == 'monochrome' and not source.image_shape:
            raise ConfigError('context.source.image_shape: required for '
                              'monochrome contexts.')
        if source.kind == 'auxiliary' and source.path is None:
            raise ConfigError('context.source.path: required for auxiliary '
                              'contexts.')
        if not 0 <= self.data.validation_fraction < 1:
            raise ConfigError('data.validation_fraction: must lie in [0, 1).')
        if not 0 <= self.data.test_fraction < 1:
            raise ConfigError('data.test_fraction: must lie in [0, 1).')
        if any(size < 1 for size in self.model.hidden) or not (
                self.model.hidden):
            raise ConfigError('model.hidden: need positive layer widths.')

    def to_dict(self) -> dict[str, Any]:
        """Return the resolved configuration as plain JSON values."""
        return asdict(self)

    def digest(self) -> str:
        """Return the SHA-256 of the canonical JSON of this configuration."""
        canonical = json.dumps(self.to_dict(), sort_keys=True,
                               separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def _matches(value: Any, annotation: Any) -> bool:
    origin = typing.get_origin(annotation)
    if annotation is Any:
        return True
    if origin is Literal:
        return value in typing.get_args(annotation)
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return (isinstance(value, (int, float))
                and not isinstance(value, bool))
    if annotation is str:
        return isinstance(value, str)
    if annotation is type(None):
        return value is None
    return False


def _convert(value: Any, annotation: Any, path: str) -> Any:
    """Convert a JSON value to `annotation`, or raise naming `path`."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        options = [option for option in typing.get_args(annotation)
                   if option is not type(None)]
        if value is None and len(options) < len(typing.get_args(annotation)):
            return None
        for option in options[:-1]:
            try:
                return _convert(value, option, path)
            except ConfigError:
                continue
        return _convert(value, options[-1], path)
    if origin is tuple:
        args = typing.get_args(annotation)
        if not isinstance(value, list):
            raise ConfigError(f'{path}: expected a list, got {value!r}.')
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(item, args[0], f'{path}[{i}]')
                         for i, item in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f'{path}: expected {len(args)} items.')
        return tuple(_convert(item, arg, f'{path}[{i}]')
                     for i, (item, arg) in enumerate(zip(value, args)))
    if isinstance(annotation, type) and hasattr(annotation,
                                                '__dataclass_fields__'):
        return _section(annotation, value, path)
    if not _matches(value, annotation):
        raise ConfigError(f'{path}: invalid value {value!r}.')
    return float(value) if annotation is float else value


def _section(cls: type, data: Any, path: str) -> Any:
    """Build the dataclass `cls` from a JSON object."""
    if not isinstance(data, dict):
        raise ConfigError(f'{path or "config"}: expected an object.')
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f'{path}.' if path else ''
        raise ConfigError(f'{prefix}{unknown[0]}: unknown key.')
    values = {}
    for f in fields(cls):
        key = f'{path}.{f.name}' if path else f.name
        if f.name in data:
            values[f.name] = _convert(data[f.name], hints[f.name], key)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f'{key}: required key is missing.')
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as error:
        raise ConfigError(f'{path or "config"}: {error}') from error


def _resolve(base: Path, path: str | None) -> str | None:
    if path is None or Path(path).is_absolute():
        return path
    return str(base / path)


def parse_run_config(data: Any, base_dir: str | os.PathLike = '.'
                     ) -> RunConfig:
    """Build a :py:class:`RunConfig` from decoded JSON.

    Relative data paths are taken relative to `base_dir`.

    Raises:
        ConfigError: Naming the dotted path of the first bad key.
    """
    config = _section(RunConfig, data, '')
    base = Path(base_dir)
    data_section = config.data
    source = config.context.source
    return RunConfig(
        **{**vars(config),
           'data': DataSection(**{**vars(data_section),
                                  'train': _resolve(base, data_section.train),
                                  'test': _resolve(base, data_section.test)}),
           'context': ContextSection(**{
               **vars(config.context),
               'source': SourceSection(**{**vars(source),
                                          'path': _resolve(base,
                                                           source.path)})}),
           'evaluation': EvaluationSection(**{
               **vars(config.evaluation),
               'ood': _resolve(base, config.evaluation.ood)})}
    )


def load_run_config(path: str | os.PathLike) -> RunConfig:
    """Read and validate the JSON run configuration at `path`."""
    with open(path, encoding='utf-8') as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as error:
            raise ConfigError(f'{path}: not valid JSON ({error}).') from error
    return parse_run_config(data, Path(path).parent)
