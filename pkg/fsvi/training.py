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
"""Stochastic optimization of the variational objective with Adam.

:py:func:`train` runs seeded epochs of shuffled mini-batches; every step
draws fresh context sets, differentiates the objective and takes an Adam
step on the concatenated ``(mu, rho)`` vector. :py:func:`train_map_ensemble`
trains the deterministic MAP ensemble baseline with the same loop.
"""
from __future__ import annotations
from dataclasses import dataclass, field, replace
from enum import StrEnum
import logging
import math

import numpy as np
import pandas as pd

from fsvi.context import ContextConfig, UniformBox, assemble_contexts
from fsvi.data import Dataset
from fsvi.errors import DimensionMismatch, EmptyData, FactorizationFailed
from fsvi.evaluation import (
    DEFAULT_EVAL_SAMPLES, PredictiveOutput, ensemble_predictive, nll,
    posterior_predictive
)
from fsvi.gaussian import DEFAULT_JITTER
from fsvi.linearization import LinearizationConfig, LinearizationMode
from fsvi.neuralnetwork import MlpSpec, forward, init_params, vjp
from fsvi.objective import (
    GradPolicy, Likelihood, PriorSpec, VariationalPosterior, elbo_grad
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamHyper:
    """Adam's decay rates and numerical epsilon."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self) -> None:
        """Validate the hyperparameters."""
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError('Adam decay rates must lie in [0, 1).')
        if not self.eps > 0:
            raise ValueError('Adam epsilon must be positive.')


@dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moment estimates after `step` updates."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        """Return the state before the first update."""
        return cls(0, np.zeros(size), np.zeros(size))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              hyper: AdamHyper, learning_rate: float
              ) -> tuple[AdamState, np.ndarray]:
    """Take one bias-corrected Adam step, descending `grads`.

    Returns:
        state: The moments after the update, with the step count
               incremented.
        params: The updated parameters.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.m.shape or params.shape != state.m.shape:
        raise DimensionMismatch(
            f'Gradient of shape {grads.shape} does not match an Adam state '
            + f'of shape {state.m.shape}.'
        )
    step = state.step + 1
    m = hyper.beta1 * state.m + (1 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1 - hyper.beta2) * grads ** 2
    m_hat = m / (1 - hyper.beta1 ** step)
    v_hat = v / (1 - hyper.beta2 ** step)
    update = learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return AdamState(step, m, v), params - update


class Schedule(StrEnum):
    """Learning-rate schedules."""

    CONSTANT = 'constant'
    COSINE = 'cosine'


def learning_rate_at(base: float, step: int, total_steps: int,
                     schedule: Schedule = Schedule.CONSTANT,
                     alpha: float = 0.05) -> float:
    """Return the learning rate for 0-based `step` of `total_steps`.

    The cosine schedule decays from `base` to ``alpha * base``.
    """
    if schedule is Schedule.CONSTANT or total_steps <= 0:
        return base
    progress = min(step / total_steps, 1.0)
    cosine = 0.5 * (1 + math.cos(math.pi * progress))
    return base * ((1 - alpha) * cosine + alpha)


@dataclass(frozen=True, eq=False)
class TrainConfig:
    """Everything :py:func:`train` needs besides the network and data."""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam: AdamHyper = field(default_factory=AdamHyper)
    mc_samples: int = 5
    """M, likelihood samples per step."""
    linearization_samples: int = 1
    """R, Monte Carlo samples of the alpha block."""
    linearization_mode: LinearizationMode = LinearizationMode.MC_PARTITION
    kl_scale: float = 1.0
    grad_policy: GradPolicy = GradPolicy.STOP_GRAD_JACOBIAN
    seed: int = 0
    context: ContextConfig | None = None
    """Context sets; ``None`` samples 10 points from the empirical box."""
    likelihood: Likelihood = field(default_factory=Likelihood)
    prior: PriorSpec = field(default_factory=PriorSpec)
    init_sigma: float = 1e-3
    schedule: Schedule = Schedule.CONSTANT
    cosine_alpha: float = 0.05
    eval_samples: int = DEFAULT_EVAL_SAMPLES
    """Predictive draws for the per-epoch validation log-likelihood."""
    jitter_schedule: tuple[float, ...] = DEFAULT_JITTER

    def __post_init__(self) -> None:
        """Validate the configuration."""
        for name in ('epochs', 'kl_scale'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be non-negative.')
        for name in ('batch_size', 'learning_rate', 'mc_samples',
                     'linearization_samples', 'init_sigma', 'eval_samples'):
            if not getattr(self, name) > 0:
                raise ValueError(f'{name} must be positive.')
        object.__setattr__(self, 'linearization_mode',
                           LinearizationMode(self.linearization_mode))
        object.__setattr__(self, 'grad_policy', GradPolicy(self.grad_policy))
        object.__setattr__(self, 'schedule', Schedule(self.schedule))
        object.__setattr__(self, 'jitter_schedule',
                           tuple(self.jitter_schedule))

    @property
    def lin_config(self) -> LinearizationConfig:
        """Return the pushforward settings."""
        return LinearizationConfig(self.linearization_mode,
                                   self.linearization_samples)


@dataclass(frozen=True)
class StepRecord:
    """Diagnostics of one optimizer step."""

    step: int
    epoch: int
    elbo: float
    ell: float
    fkl: float
    argmax_index: int
    grad_norm: float
    member: int = 0
    """Ensemble member (always 0 for FSVI)."""


@dataclass(frozen=True)
class EpochRecord:
    """Validation summary at the end of an epoch."""

    epoch: int
    mean_elbo: float
    val_log_likelihood: float | None = None


@dataclass
class TrainHistory:
    """Append-only log of a training run."""

    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Return one row per step, joined with the epoch validation."""
        steps = pd.DataFrame([vars(record) for record in self.steps],
                             columns=list(StepRecord.__dataclass_fields__))
        epochs = pd.DataFrame([vars(record) for record in self.epochs],
                              columns=list(EpochRecord.__dataclass_fields__))
        if steps.empty or epochs.empty:
            return steps
        return steps.merge(epochs[['epoch', 'val_log_likelihood']],
                           on='epoch', how='left')


@dataclass(frozen=True, eq=False)
class TrainResult:
    """The trained posterior with its history.

    Attributes:
        posterior: The posterior after the last step.
        history: Per-step and per-epoch diagnostics.
        best_posterior: The posterior at the end of the epoch with the
                        highest validation log-likelihood (the final
                        posterior when there is no validation split).
        best_epoch: That epoch, or ``None`` if no epoch ran.
    """

    posterior: VariationalPosterior
    history: TrainHistory
    best_posterior: VariationalPosterior
    best_epoch: int | None


def _batches(num_rows: int, batch_size: int,
             rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(num_rows)
    return [order[start:start + batch_size]
            for start in range(0, num_rows, batch_size)]


def _seeds(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Return independent training and validation generators."""
    train_seed, val_seed = np.random.SeedSequence(seed).spawn(2)
    return (np.random.default_rng(train_seed),
            np.random.default_rng(val_seed))


def _check_data(spec: MlpSpec, train_set: Dataset) -> None:
    if len(train_set) == 0:
        raise EmptyData('The training split is empty.')
    if train_set.X.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f'Training inputs have {train_set.X.shape[1]} columns but the '
            + f'network expects {spec.input_dim}.'
        )


def train(spec: MlpSpec, data: tuple[Dataset, Dataset | None],
          config: TrainConfig) -> TrainResult:
    """Fit a mean-field posterior by maximizing the variational objective.

    Each epoch shuffles the training split and takes one step per
    mini-batch. The expected log-likelihood is scaled by
    ``N / batch_size`` so the objective estimates the full-data one. All
    randomness derives from ``config.seed``.

    Args:
        spec: The network architecture.
        data: The training split and an optional validation split.
        config: Optimization, context, likelihood and prior settings.

    Returns:
        result: Final and best-validation posteriors with the history.

    Raises:
        EmptyData: If the training split is empty.
        FactorizationFailed: If a pushforward covariance cannot be
                             factorized; the error names the context set.
    """
    train_set, val_set = data
    _check_data(spec, train_set)
    rng, val_rng = _seeds(config.seed)
    context = config.context or ContextConfig(
        UniformBox.from_data(train_set.X)
    )
    lin_config = config.lin_config
    q = VariationalPosterior.initialize(spec, rng, config.init_sigma)
    num_params = spec.num_params
    state = AdamState.zeros(2 * num_params)
    history = TrainHistory()
    best, best_epoch, best_ll = q, None, -np.inf

    num_rows = len(train_set)
    total_steps = config.epochs * math.ceil(num_rows / config.batch_size)
    logger.info('Training %d parameters on %d rows for %d steps',
                num_params, num_rows, total_steps)
    for epoch in range(config.epochs):
        elbos = []
        for rows in _batches(num_rows, config.batch_size, rng):
            X, y = train_set.X[rows], train_set.y[rows]
            contexts = assemble_contexts(context, X, rng)
            try:
                grad = elbo_grad(
                    q, config.prior, spec, (X, y), contexts,
                    config.likelihood, config.mc_samples, lin_config, rng,
                    kl_scale=config.kl_scale,
                    grad_policy=config.grad_policy,
                    data_scale=num_rows / len(rows),
                    jitter_schedule=config.jitter_schedule
                )
            except FactorizationFailed as error:
                logger.error('Step %d aborted: %s', state.step, error)
                raise
            diagnostics = grad.diagnostics
            history.steps.append(StepRecord(
                state.step, epoch, grad.value, diagnostics.ell,
                diagnostics.fkl, diagnostics.argmax_index, grad.norm
            ))
            elbos.append(grad.value)
            logger.debug('step %d: elbo=%.6g ell=%.6g fkl=%.6g',
                         state.step, grad.value, diagnostics.ell,
                         diagnostics.fkl)
            learning_rate = learning_rate_at(
                config.learning_rate, state.step, total_steps,
                config.schedule, config.cosine_alpha
            )
            state, params = adam_step(
                state, np.concatenate([q.mu, q.rho]),
                np.concatenate([grad.mu, grad.rho]), config.adam,
                learning_rate
            )
            q = VariationalPosterior(params[:num_params],
                                     params[num_params:])

        val_ll = None
        if val_set is not None and len(val_set) > 0:
            predictive = posterior_predictive(
                q, spec, val_set.X, config.likelihood, config.eval_samples,
                val_rng
            )
            val_ll = -nll(predictive, val_set.y)
        history.epochs.append(EpochRecord(epoch, float(np.mean(elbos)),
                                          val_ll))
        if val_ll is None or val_ll > best_ll:
            best, best_epoch = q, epoch
            best_ll = -np.inf if val_ll is None else val_ll
        logger.info('epoch %d: mean elbo %.6g, validation ll %s', epoch,
                    np.mean(elbos), 'n/a' if val_ll is None
                    else f'{val_ll:.6g}')
    return TrainResult(q, history, best, best_epoch)


@dataclass(frozen=True, eq=False)
class MapEnsemble:
    """Independently trained maximum a posteriori networks."""

    spec: MlpSpec
    members: tuple[np.ndarray, ...]
    history: TrainHistory = field(default_factory=TrainHistory)

    def predictive(self, X: np.ndarray,
                   likelihood: Likelihood) -> PredictiveOutput:
        """Return the equal-weight predictive of the members."""
        return ensemble_predictive(self.spec, self.members, X, likelihood)


def _map_loss_grad(spec: MlpSpec, params: np.ndarray, X: np.ndarray,
                   y: np.ndarray, likelihood: Likelihood, data_scale: float,
                   weight_decay: float) -> tuple[float, np.ndarray]:
    """Return the penalized negative log-likelihood and its gradient."""
    outputs = forward(spec, params, X)
    log_lik = float(np.sum(likelihood.log_prob(outputs, y)))
    grad = -data_scale * vjp(spec, params, X,
                             likelihood.grad_log_prob(outputs, y))
    loss = (-data_scale * log_lik
            + 0.5 * weight_decay * float(params @ params))
    return loss, grad + weight_decay * params


def train_map_ensemble(spec: MlpSpec, data: tuple[Dataset, Dataset | None],
                       config: TrainConfig, members: int = 5,
                       weight_decay: float = 0.1) -> MapEnsemble:
    """Train `members` MAP networks from independent initializations.

    Each member minimizes ``-(N / B) sum log p(y | f) + weight_decay / 2
    * ||theta||^2`` with the Adam settings, batch size, epochs and seed of
    `config`. The validation split, if any, is reported in the history of
    the ensemble predictive after the final epoch.
    """
    if members < 1:
        raise ValueError('An ensemble needs at least one member.')
    if weight_decay < 0:
        raise ValueError('Weight decay must be non-negative.')
    train_set, val_set = data
    _check_data(spec, train_set)
    num_rows = len(train_set)
    history = TrainHistory()
    trained = []
    for member, seed in enumerate(
            np.random.SeedSequence(config.seed).spawn(members)):
        rng = np.random.default_rng(seed)
        params = init_params(spec, rng).values.copy()
        state = AdamState.zeros(spec.num_params)
        total_steps = config.epochs * math.ceil(num_rows / config.batch_size)
        for epoch in range(config.epochs):
            for rows in _batches(num_rows, config.batch_size, rng):
                loss, grad = _map_loss_grad(
                    spec, params, train_set.X[rows], train_set.y[rows],
                    config.likelihood, num_rows / len(rows), weight_decay
                )
                history.steps.append(StepRecord(
                    state.step, epoch, -loss, -loss, 0.0, 0,
                    float(np.linalg.norm(grad)), member
                ))
                learning_rate = learning_rate_at(
                    config.learning_rate, state.step, total_steps,
                    config.schedule, config.cosine_alpha
                )
                state, params = adam_step(state, params, grad, config.adam,
                                          learning_rate)
        logger.info('Ensemble member %d trained', member)
        trained.append(params)

    ensemble = MapEnsemble(spec, tuple(trained), history)
    if val_set is not None and len(val_set) > 0 and config.epochs > 0:
        val_ll = -nll(ensemble.predictive(val_set.X, config.likelihood),
                      val_set.y)
        history.epochs.append(EpochRecord(config.epochs - 1, float('nan'),
                                          val_ll))
    return ensemble


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    """Return a copy of `config` with another seed."""
    return replace(config, seed=seed)

