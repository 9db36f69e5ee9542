#    Copyright 2023 Alexander Koziell-Pipe

#    Licensed under the Apache License, Version 2.0 (the "License");
#    you may not use this file except in compliance with the License.
#    You may obtain a copy of the License at

#        http://www.apache.org/licenses/LICENSE-2.0

#    Unless required by applicable law or agreed to in writing, software
#    distributed under the License is distributed on an "AS IS" BASIS,
#    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#    See the License for the specific language governing permissions and
#    limitations under the License.
"""Multi-layer perceptrons with manually specified derivatives.

A network is a chain of dense :py:class:`Layer` operations. Each layer
knows its forward :py:meth:`Layer.operation`, its forward-mode
:py:meth:`Layer.tangent` and its :py:meth:`Layer.reverse_derivative`; the
module-level functions compose these through the layer chain to obtain
outputs, Jacobian-vector products, vector-Jacobian products and full
parameter Jacobians.

Parameters live in a single flat vector laid out as
``(W_1 row-major, b_1, W_2, b_2, ...)``, with ``W_l`` of shape
``(fan_out, fan_in)``. The final layer's block is therefore contiguous and
trailing.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any, Literal

import numpy as np

from fsvi.errors import DimensionMismatch


class Activation(StrEnum):
    """Elementwise hidden-layer nonlinearities."""

    TANH = 'tanh'
    RELU = 'relu'
    IDENTITY = 'identity'

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """Apply the activation."""
        match self:
            case Activation.TANH:
                return np.tanh(z)
            case Activation.RELU:
                return np.maximum(z, 0.0)
            case Activation.IDENTITY:
                return z

    def derivative(self, z: np.ndarray) -> np.ndarray:
        """Return the elementwise derivative at pre-activation `z`.

        The ReLU derivative at exactly zero is taken to be zero.
        """
        match self:
            case Activation.TANH:
                return 1.0 - np.tanh(z) ** 2
            case Activation.RELU:
                return (z > 0).astype(np.float64)
            case Activation.IDENTITY:
                return np.ones_like(z)

    def second_derivative(self, z: np.ndarray) -> np.ndarray:
        """Return the elementwise second derivative at `z`."""
        match self:
            case Activation.TANH:
                t = np.tanh(z)
                return -2.0 * t * (1.0 - t ** 2)
            case Activation.RELU | Activation.IDENTITY:
                return np.zeros_like(z)


@dataclass(frozen=True)
class MlpSpec:
    """The architecture of a multi-layer perceptron.

    The output layer has identity activation, so the network maps inputs
    to unconstrained outputs (regression means or class logits).
    """

    layer_sizes: tuple[int, ...]
    """Input dimension D, hidden widths, output dimension Q."""
    activations: tuple[Activation, ...]
    """One activation per hidden layer."""

    def __post_init__(self) -> None:
        """Validate the architecture."""
        sizes = tuple(int(size) for size in self.layer_sizes)
        if len(sizes) < 3:
            raise ValueError('An MLP needs at least one hidden layer.')
        if any(size <= 0 for size in sizes):
            raise ValueError(f'Layer sizes must be positive, got {sizes}.')
        activations = tuple(Activation(a) for a in self.activations)
        if len(activations) != len(sizes) - 2:
            raise ValueError(
                f'Expected {len(sizes) - 2} hidden activations, '
                + f'got {len(activations)}.'
            )
        object.__setattr__(self, 'layer_sizes', sizes)
        object.__setattr__(self, 'activations', activations)

    @classmethod
    def build(cls, input_dim: int, hidden: list[int], output_dim: int,
              activation: Activation | str = Activation.TANH) -> MlpSpec:
        """Create a spec using the same activation in every hidden layer."""
        return cls((input_dim, *hidden, output_dim),
                   (Activation(activation),) * len(hidden))

    @property
    def input_dim(self) -> int:
        """Return the input dimension D."""
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        """Return the output dimension Q."""
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        """Return the number of dense layers L."""
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """Return ``(fan_out, fan_in)`` for every dense layer."""
        return [(fan_out, fan_in) for fan_in, fan_out
                in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def num_params(self) -> int:
        """Return P, the total number of weights and biases."""
        return sum((fan_in + 1) * fan_out
                   for fan_out, fan_in in self.layer_shapes)

    @property
    def num_final_params(self) -> int:
        """Return the number of parameters in the final layer."""
        return (self.layer_sizes[-2] + 1) * self.output_dim

    def activation(self, layer: int) -> Activation:
        """Return the activation applied after dense layer `layer`."""
        if layer < self.num_layers - 1:
            return self.activations[layer]
        return Activation.IDENTITY

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-serializable description."""
        return {'layer_sizes': list(self.layer_sizes),
                'activations': [str(a) for a in self.activations]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MlpSpec:
        """Inverse of :py:meth:`to_dict`."""
        return cls(tuple(data['layer_sizes']), tuple(data['activations']))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat parameter vector together with the layout it follows."""

    spec: MlpSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        """Check the vector length against the architecture."""
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (self.spec.num_params,):
            raise DimensionMismatch(
                f'Parameter vector of shape {values.shape} does not match '
                + f'a network with {self.spec.num_params} parameters.'
            )
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def to_layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split the vector into per-layer ``(weight, bias)`` pairs."""
        layers = []
        offset = 0
        for fan_out, fan_in in self.spec.layer_shapes:
            weight = self.values[offset:offset + fan_out * fan_in]
            offset += fan_out * fan_in
            bias = self.values[offset:offset + fan_out]
            offset += fan_out
            layers.append((weight.reshape(fan_out, fan_in), bias))
        return layers

    @classmethod
    def from_layers(cls, spec: MlpSpec,
                    layers: list[tuple[np.ndarray, np.ndarray]]
                    ) -> ParamVector:
        """Flatten per-layer ``(weight, bias)`` pairs into a vector."""
        if len(layers) != spec.num_layers:
            raise DimensionMismatch(
                f'Expected {spec.num_layers} layers, got {len(layers)}.'
            )
        blocks = []
        for (weight, bias), shape in zip(layers, spec.layer_shapes):
            if np.shape(weight) != shape or np.shape(bias) != shape[:1]:
                raise DimensionMismatch(
                    f'Layer of shape {np.shape(weight)} does not match '
                    + f'{shape}.'
                )
            blocks += [np.ravel(weight), np.ravel(bias)]
        return cls(spec, np.concatenate(blocks))


@dataclass(frozen=True, eq=False)
class Partition:
    """A split of parameter indices into a sampled and a closed-form block.

    By default `beta` holds the final layer's parameters and `alpha`
    everything before it.
    """

    alpha: np.ndarray
    beta: np.ndarray
    num_params: int = field(default=0)

    def __post_init__(self) -> None:
        """Check that alpha and beta partition the parameter indices."""
        alpha = np.asarray(self.alpha, dtype=np.intp)
        beta = np.asarray(self.beta, dtype=np.intp)
        num_params = self.num_params or alpha.size + beta.size
        union = np.concatenate([alpha, beta])
        if (union.size != num_params
                or not np.array_equal(np.sort(union), np.arange(num_params))):
            raise ValueError(
                'Alpha and beta must partition the parameter indices.'
            )
        object.__setattr__(self, 'alpha', alpha)
        object.__setattr__(self, 'beta', beta)
        object.__setattr__(self, 'num_params', num_params)

    @classmethod
    def default(cls, spec: MlpSpec) -> Partition:
        """Put the final layer in beta and all other layers in alpha."""
        split = spec.num_params - spec.num_final_params
        return cls(np.arange(split), np.arange(split, spec.num_params),
                   spec.num_params)

    def is_final_layer(self, spec: MlpSpec) -> bool:
        """Return whether beta is exactly the final layer of `spec`."""
        return (self.num_params == spec.num_params
                and self.beta.size == spec.num_final_params
                and np.array_equal(
                    self.beta,
                    np.arange(spec.num_params - spec.num_final_params,
                              spec.num_params)))


@dataclass(frozen=True, eq=False)
class Layer:
    """A dense layer ``a_out = activation(a_in W^T + b)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation

    def operation(self, inputs: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
        """Return pre-activations and activations for a batch of inputs."""
        pre = inputs @ self.weight.T + self.bias
        return pre, self.activation(pre)

    def tangent(self, inputs: np.ndarray, pre: np.ndarray,
                input_tangent: np.ndarray | None,
                weight_tangent: np.ndarray, bias_tangent: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
        """Push a parameter tangent through the layer (forward mode).

        Weight and bias tangents are either shared by the whole batch
        (shapes ``(out, in)`` and ``(out,)``) or given per example
        (shapes ``(N, out, in)`` and ``(N, out)``).

        Returns:
            pre_tangent: Tangent of the pre-activations.
            tangent: Tangent of the activations.
        """
        if weight_tangent.ndim == 3:
            pre_tangent = np.einsum('noi,ni->no', weight_tangent, inputs)
        else:
            pre_tangent = inputs @ weight_tangent.T
        pre_tangent = pre_tangent + bias_tangent
        if input_tangent is not None:
            pre_tangent = pre_tangent + input_tangent @ self.weight.T
        return pre_tangent, self.activation.derivative(pre) * pre_tangent

    def reverse_derivative(self, inputs: np.ndarray,
                           pre_cotangent: np.ndarray,
                           per_example: bool = False
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pull a cotangent of the pre-activations back through the layer.

        Args:
            inputs: The layer inputs used in the forward pass.
            pre_cotangent: Cotangent of the pre-activations, shape (N, out).
            per_example: Whether to keep parameter cotangents separate for
                         each example instead of summing over the batch.

        Returns:
            weight_cotangent: Shape (out, in), or (N, out, in).
            bias_cotangent: Shape (out,), or (N, out).
            input_cotangent: Cotangent of the layer inputs, shape (N, in).
        """
        input_cotangent = pre_cotangent @ self.weight
        if per_example:
            weight_cotangent = pre_cotangent[:, :, None] * inputs[:, None, :]
            return weight_cotangent, pre_cotangent, input_cotangent
        return (pre_cotangent.T @ inputs, pre_cotangent.sum(axis=0),
                input_cotangent)


def _values(spec: MlpSpec, params: ParamVector | np.ndarray) -> np.ndarray:
    if isinstance(params, ParamVector):
        if params.spec != spec:
            raise DimensionMismatch('Parameters belong to another network.')
        return params.values
    values = np.asarray(params, dtype=np.float64)
    if values.shape != (spec.num_params,):
        raise DimensionMismatch(
            f'Parameter vector of shape {values.shape} does not match '
            + f'a network with {spec.num_params} parameters.'
        )
    return values


def _inputs(spec: MlpSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f'Inputs of shape {X.shape} do not match input dimension '
            + f'{spec.input_dim}.'
        )
    return X


def layers(spec: MlpSpec, params: ParamVector | np.ndarray) -> list[Layer]:
    """Return the chain of dense layers described by `params`."""
    pairs = ParamVector(spec, _values(spec, params)).to_layers()
    return [Layer(weight, bias, spec.activation(index))
            for index, (weight, bias) in enumerate(pairs)]


def _split(spec: MlpSpec, flat: np.ndarray
           ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector (or a batch of them) into per-layer blocks."""
    batch = flat.shape[:-1]
    blocks = []
    offset = 0
    for fan_out, fan_in in spec.layer_shapes:
        weight = flat[..., offset:offset + fan_out * fan_in]
        offset += fan_out * fan_in
        bias = flat[..., offset:offset + fan_out]
        offset += fan_out
        blocks.append((weight.reshape(*batch, fan_out, fan_in), bias))
    return blocks


def _join(blocks: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :py:func:`_split`."""
    flat = []
    for weight, bias in blocks:
        flat.append(weight.reshape(*bias.shape[:-1], -1))
        flat.append(bias)
    return np.concatenate(flat, axis=-1)


@dataclass
class _Trace:
    """Inputs and pre-activations of every layer of a forward pass."""

    inputs: list[np.ndarray]
    pres: list[np.ndarray]
    output: np.ndarray


def _forward_trace(chain: list[Layer], X: np.ndarray) -> _Trace:
    inputs, pres = [], []
    activations = X
    for layer in chain:
        inputs.append(activations)
        pre, activations = layer.operation(activations)
        pres.append(pre)
    return _Trace(inputs, pres, activations)


def _backward(chain: list[Layer], trace: _Trace, cotangent: np.ndarray,
              per_example: bool) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse accumulation of an output cotangent through the chain."""
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    pre_cotangent = cotangent
    for index in reversed(range(len(chain))):
        layer = chain[index]
        weight_cot, bias_cot, input_cot = layer.reverse_derivative(
            trace.inputs[index], pre_cotangent, per_example
        )
        grads.append((weight_cot, bias_cot))
        if index > 0:
            previous = chain[index - 1]
            pre_cotangent = (input_cot
                             * previous.activation.derivative(
                                 trace.pres[index - 1]))
    return grads[::-1]


def forward(spec: MlpSpec, params: ParamVector | np.ndarray,
            X: np.ndarray) -> np.ndarray:
    """Evaluate the network on the rows of `X`.

    Returns:
        outputs: An N x Q array whose row i is f(x_i; params).
    """
    X = _inputs(spec, X)
    return _forward_trace(layers(spec, params), X).output


def hidden_features(spec: MlpSpec, params: ParamVector | np.ndarray,
                    X: np.ndarray) -> np.ndarray:
    """Return the activations feeding the final layer, shape N x H."""
    X = _inputs(spec, X)
    return _forward_trace(layers(spec, params), X).inputs[-1]


def vjp(spec: MlpSpec, params: ParamVector | np.ndarray, X: np.ndarray,
        cotangent: np.ndarray) -> np.ndarray:
    """Return J(X; params)^T c for an N x Q output cotangent `c`."""
    X = _inputs(spec, X)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (X.shape[0], spec.output_dim):
        raise DimensionMismatch(
            f'Cotangent of shape {cotangent.shape} does not match outputs '
            + f'of shape {(X.shape[0], spec.output_dim)}.'
        )
    chain = layers(spec, params)
    trace = _forward_trace(chain, X)
    return _join(_backward(chain, trace, cotangent, per_example=False))


def jvp(spec: MlpSpec, params: ParamVector | np.ndarray, X: np.ndarray,
        tangent: np.ndarray) -> np.ndarray:
    """Return J(X; params) v as an N x Q array, without forming J."""
    X = _inputs(spec, X)
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (spec.num_params,):
        raise DimensionMismatch(
            f'Tangent of shape {tangent.shape} does not match '
            + f'{spec.num_params} parameters.'
        )
    chain = layers(spec, params)
    activations, activation_tangent = X, None
    for layer, (weight_t, bias_t) in zip(chain, _split(spec, tangent)):
        pre, next_activations = layer.operation(activations)
        _, activation_tangent = layer.tangent(
            activations, pre, activation_tangent, weight_t, bias_t
        )
        activations = next_activations
    return activation_tangent


def param_jacobian(spec: MlpSpec, params: ParamVector | np.ndarray,
                   X: np.ndarray) -> np.ndarray:
    """Return the (N*Q) x P Jacobian of the outputs with respect to params.

    Row ``i * Q + q`` is the gradient of output `q` at input `x_i`. The
    Jacobian is assembled output by output, with one per-example reverse
    pass for each of the Q outputs.
    """
    X = _inputs(spec, X)
    chain = layers(spec, params)
    trace = _forward_trace(chain, X)
    num_points, num_outputs = X.shape[0], spec.output_dim
    jacobian = np.empty((num_points * num_outputs, spec.num_params))
    for output in range(num_outputs):
        cotangent = np.zeros((num_points, num_outputs))
        cotangent[:, output] = 1.0
        grads = _backward(chain, trace, cotangent, per_example=True)
        jacobian[output::num_outputs] = _join(grads)
    return jacobian


def final_layer_jacobian(spec: MlpSpec, params: ParamVector | np.ndarray,
                         X: np.ndarray) -> np.ndarray:
    """Return the Jacobian columns of the final layer in closed form.

    The derivative of output `q` at `x_i` with respect to final weight
    ``W[q, j]`` is the hidden activation ``h_j(x_i)``, with respect to
    final bias ``b[q]`` it is one, and it is zero for every other output.
    """
    features = hidden_features(spec, params, X)
    num_points, width = features.shape
    num_outputs = spec.output_dim
    jacobian = np.zeros((num_points * num_outputs,
                         num_outputs * (width + 1)))
    for output in range(num_outputs):
        rows = slice(output, None, num_outputs)
        jacobian[rows, output * width:(output + 1) * width] = features
        jacobian[rows, num_outputs * width + output] = 1.0
    return jacobian


def jacobian_contraction_grad(spec: MlpSpec,
                              params: ParamVector | np.ndarray,
                              X: np.ndarray, weights: np.ndarray
                              ) -> np.ndarray:
    """Return the gradient of ``sum(weights * J(X; params))`` w.r.t. params.

    This is the derivative of the Jacobian itself, contracted against a
    fixed (N*Q) x P weight matrix. It is computed by reverse accumulation
    through the forward-mode tangent pass: for each output `q`, row
    ``i * Q + q`` of `weights` is pushed forward as a per-example tangent
    and the q-th output tangent is differentiated back to the parameters.
    """
    X = _inputs(spec, X)
    weights = np.asarray(weights, dtype=np.float64)
    num_points, num_outputs = X.shape[0], spec.output_dim
    if weights.shape != (num_points * num_outputs, spec.num_params):
        raise DimensionMismatch(
            f'Weights of shape {weights.shape} do not match a Jacobian of '
            + f'shape {(num_points * num_outputs, spec.num_params)}.'
        )
    chain = layers(spec, params)
    trace = _forward_trace(chain, X)
    num_layers = len(chain)
    total = [(np.zeros_like(layer.weight), np.zeros_like(layer.bias))
             for layer in chain]

    for output in range(num_outputs):
        tangents = _split(spec, weights[output::num_outputs])
        # Forward-mode pass with one tangent direction per example.
        pre_tangents, act_tangents = [], [None]
        activation_tangent = None
        for index, layer in enumerate(chain):
            weight_t, bias_t = tangents[index]
            pre_tangent, activation_tangent = layer.tangent(
                trace.inputs[index], trace.pres[index], activation_tangent,
                weight_t, bias_t
            )
            pre_tangents.append(pre_tangent)
            act_tangents.append(activation_tangent)

        # Reverse pass over both the primal and the tangent computations.
        pre_cot = np.zeros((num_points, num_outputs))
        pre_tangent_cot = np.zeros((num_points, num_outputs))
        pre_tangent_cot[:, output] = 1.0
        for index in reversed(range(num_layers)):
            layer = chain[index]
            inputs = trace.inputs[index]
            input_tangent = act_tangents[index]
            weight_t, _ = tangents[index]
            grad_weight, grad_bias = total[index]
            grad_weight += pre_cot.T @ inputs
            grad_bias += pre_cot.sum(axis=0)
            input_cot = pre_cot @ layer.weight
            input_cot += np.einsum('noi,no->ni', weight_t, pre_tangent_cot)
            if input_tangent is not None:
                grad_weight += pre_tangent_cot.T @ input_tangent
            input_tangent_cot = pre_tangent_cot @ layer.weight
            if index == 0:
                break
            previous = chain[index - 1]
            pre = trace.pres[index - 1]
            pre_cot = (input_cot * previous.activation.derivative(pre)
                       + input_tangent_cot * pre_tangents[index - 1]
                       * previous.activation.second_derivative(pre))
            pre_tangent_cot = (input_tangent_cot
                               * previous.activation.derivative(pre))
    return _join(total)


def init_params(spec: MlpSpec, rng: np.random.Generator,
                scheme: Literal['uniform_fan_in', 'zeros'] = 'uniform_fan_in'
                ) -> ParamVector:
    """Initialize network parameters.

    `uniform_fan_in` draws every weight from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)) and sets biases to zero; `zeros` zeros everything.
    """
    match scheme:
        case 'zeros':
            return ParamVector(spec, np.zeros(spec.num_params))
        case 'uniform_fan_in':
            pairs = []
            for fan_out, fan_in in spec.layer_shapes:
                bound = 1.0 / np.sqrt(fan_in)
                pairs.append((rng.uniform(-bound, bound, (fan_out, fan_in)),
                              np.zeros(fan_out)))
            return ParamVector.from_layers(spec, pairs)
        case _:
            raise ValueError(f'Unknown initialization scheme {scheme!r}.')
