"""Trainable building blocks shared by both stages"""

from __future__ import annotations

import math
from collections.abc import Iterator, Sequence
from typing import Any

import numpy as np
from exceptions import DimensionError
from tensor import (
    Tensor,
    conv2d,
    layer_norm,
    matmul,
    relu,
    reshape,
    sigmoid,
    tanh,
)


class Parameter(Tensor):
    """A learnable tensor; ``name`` is its dotted path inside the owning model"""

    def __init__(self, data: Any, name: str = "") -> None:
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="parameter")
        self.name = name


def glorot_uniform(
    rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int
) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


class Module:
    """
    Base class for anything that owns parameters.

    Parameters and sub-modules are discovered from instance attributes
    (including lists of modules), in assignment order, so names are stable
    across runs and unique by construction.
    """

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Parameter | Module]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter | Module):
                yield attr, value
            elif isinstance(value, list | tuple):
                for position, item in enumerate(value):
                    if isinstance(item, Parameter | Module):
                        yield f"{attr}.{position}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        """Dotted path -> Parameter, for every parameter below this module"""
        found: dict[str, Parameter] = {}
        for attr, child in self._children():
            path = f"{prefix}{attr}"
            if isinstance(child, Parameter):
                child.name = path
                found[path] = child
            else:
                found.update(child.named_parameters(prefix=f"{path}."))
        return found

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def freeze(self) -> None:
        """Stop tracking gradients for every parameter of this module"""
        for param in self.parameters():
            param.requires_grad = False
            param.grad = None

    def trainable_parameters(self) -> dict[str, Parameter]:
        return {
            name: param
            for name, param in self.named_parameters().items()
            if param.requires_grad
        }


class Linear(Module):
    """Affine map over the last axis: x·W + b, W stored din×dout"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        )
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            msg = f"Linear expects {self.in_features} input features, got shape {x.shape}"
            raise DimensionError(msg)
        if x.ndim == 2:
            return linear(x, self.weight, self.bias)
        leading = x.shape[:-1]
        flat = reshape(x, (-1, self.in_features))
        return reshape(linear(flat, self.weight, self.bias), (*leading, self.out_features))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """m×din · din×dout + dout, bias broadcast over rows"""
    if weight.ndim != 2 or bias.shape != (weight.shape[1],):
        msg = f"linear: weight {weight.shape} and bias {bias.shape} disagree"
        raise DimensionError(msg)
    return matmul(x, weight) + bias


class LayerNorm(Module):
    """Row standardization followed by a learned scale and shift"""

    def __init__(self, features: int, eps: float = 1e-5) -> None:
        self.eps = eps
        self.scale = Parameter(np.ones(features))
        self.shift = Parameter(np.zeros(features))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.scale + self.shift


class LSTM(Module):
    """
    Single-layer LSTM cell applied step by step.

    Gate columns are ordered input, forget, candidate, output; states start
    at zero and only the last hidden state is returned by ``forward``.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator) -> None:
        self.input_size = input_size
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        self.weight_ih = Parameter(rng.uniform(-bound, bound, (input_size, 4 * hidden_size)))
        self.weight_hh = Parameter(rng.uniform(-bound, bound, (hidden_size, 4 * hidden_size)))
        self.bias = Parameter(np.zeros(4 * hidden_size))

    def initial_state(self) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((1, self.hidden_size))
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x_t: Tensor, hidden: Tensor, cell: Tensor) -> tuple[Tensor, Tensor]:
        if x_t.shape != (1, self.input_size) or hidden.shape != (1, self.hidden_size):
            msg = (
                f"LSTM step expects x 1×{self.input_size} and h 1×{self.hidden_size}, "
                f"got {x_t.shape} and {hidden.shape}"
            )
            raise DimensionError(msg)
        gates = matmul(x_t, self.weight_ih) + matmul(hidden, self.weight_hh) + self.bias
        size = self.hidden_size
        input_gate = sigmoid(gates[:, 0:size])
        forget_gate = sigmoid(gates[:, size : 2 * size])
        candidate = tanh(gates[:, 2 * size : 3 * size])
        output_gate = sigmoid(gates[:, 3 * size : 4 * size])
        new_cell = forget_gate * cell + input_gate * candidate
        new_hidden = output_gate * tanh(new_cell)
        return new_hidden, new_cell

    def forward(self, sequence: Sequence[Tensor]) -> Tensor:
        if not sequence:
            msg = "LSTM needs at least one step"
            raise DimensionError(msg)
        hidden, cell = self.initial_state()
        for x_t in sequence:
            hidden, cell = self.step(x_t, hidden, cell)
        return hidden


class Conv2d(Module):
    """k×k convolution with zero padding; biases start at zero"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        self.stride = stride
        self.padding = padding
        area = kernel_size * kernel_size
        self.weight = Parameter(
            glorot_uniform(
                rng,
                (out_channels, in_channels, kernel_size, kernel_size),
                in_channels * area,
                out_channels * area,
            )
        )
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)"""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator) -> None:
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:], strict=True)]

    def forward(self, x: Tensor) -> Tensor:
        for position, layer in enumerate(self.layers):
            x = layer(x)
            if position < len(self.layers) - 1:
                x = relu(x)
        return x
