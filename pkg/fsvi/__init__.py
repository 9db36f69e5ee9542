"""FSVI: Tractable function-space variational inference for Bayesian MLPs."""
from fsvi.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fsvi.context import ContextBatch, ContextConfig, assemble_contexts
from fsvi.errors import FSVIError
from fsvi.evaluation import (
    PredictiveOutput, evaluate, posterior_predictive
)
from fsvi.gaussian import DiagonalGaussian, FunctionGaussian, gaussian_kl
from fsvi.linearization import (
    LinearizationConfig, push_forward_exact, push_forward_mc
)
from fsvi.neuralnetwork import MlpSpec, Partition, forward, param_jacobian
from fsvi.objective import (
    Likelihood, PriorSpec, VariationalPosterior, elbo, elbo_grad,
    function_space_kl, supremum_estimate
)
from fsvi.training import TrainConfig, train, train_map_ensemble

__all__ = [
    'Checkpoint', 'ContextBatch', 'ContextConfig', 'DiagonalGaussian',
    'FSVIError', 'FunctionGaussian', 'Likelihood', 'LinearizationConfig',
    'MlpSpec', 'Partition', 'PredictiveOutput', 'PriorSpec', 'TrainConfig',
    'VariationalPosterior', 'assemble_contexts', 'elbo', 'elbo_grad',
    'evaluate', 'forward', 'function_space_kl', 'gaussian_kl',
    'load_checkpoint', 'param_jacobian', 'posterior_predictive',
    'push_forward_exact', 'push_forward_mc', 'save_checkpoint',
    'supremum_estimate', 'train', 'train_map_ensemble',
]
