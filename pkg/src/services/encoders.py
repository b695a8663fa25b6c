"""Multilayer-perceptron image encoders with parameter and FLOP accounting."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from src.config import EncoderSpec
from src.numerics import ops
from src.numerics.rng import Rng
from src.numerics.tape import Operand, Var
from src.numerics.tensor import ContractError, DimensionError, as_tensor

logger = logging.getLogger(__name__)


@dataclass
class EncoderParams:
    """Weights (fan_in x fan_out) and bias rows (1 x fan_out) per layer."""
    spec: EncoderSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def tensors(self) -> List[np.ndarray]:
        """Flat parameter list in serialization order: W0, b0, W1, b1, ..."""
        flat = []
        for weight, bias in zip(self.weights, self.biases):
            flat.extend([weight, bias])
        return flat

    def tensor_names(self) -> List[str]:
        names = []
        for layer in range(len(self.weights)):
            names.extend([f"layers.{layer}.weight", f"layers.{layer}.bias"])
        return names

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    @classmethod
    def from_tensors(cls, spec: EncoderSpec, tensors: Sequence[np.ndarray]) -> "EncoderParams":
        """Rebuild params from the flat list, validating the shape chain."""
        shapes = spec.layer_shapes
        if len(tensors) != 2 * len(shapes):
            raise ContractError(f"{spec.name}: expected {2 * len(shapes)} tensors, got {len(tensors)}")
        weights, biases = [], []
        for layer, (fan_in, fan_out) in enumerate(shapes):
            weight = as_tensor(tensors[2 * layer])
            bias = as_tensor(tensors[2 * layer + 1])
            if weight.shape != (fan_in, fan_out) or bias.shape != (1, fan_out):
                raise ContractError(
                    f"{spec.name}: layer {layer} has shapes {weight.shape}/{bias.shape}, "
                    f"expected {(fan_in, fan_out)}/{(1, fan_out)}"
                )
            weights.append(weight)
            biases.append(bias)
        return cls(spec=spec, weights=weights, biases=biases)


def init_params(spec: EncoderSpec, rng: Rng) -> EncoderParams:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes:
        weights.append(rng.normal((fan_in, fan_out), scale=np.sqrt(2.0 / fan_in)))
        biases.append(np.zeros((1, fan_out)))
    logger.debug(f"Initialized {spec.name} with {count_params(spec)} parameters")
    return EncoderParams(spec=spec, weights=weights, biases=biases)


def _check_input(spec: EncoderSpec, cols: int) -> None:
    if cols != spec.input_dim:
        raise DimensionError(f"forward[{spec.name}]", (-1, cols), (spec.input_dim, -1))


def forward(params: Union[EncoderParams, Sequence[Operand]], x: Operand,
            spec: Union[EncoderSpec, None] = None) -> Var:
    """Batch features through the tape: ReLU between layers, linear output.

    ``params`` is either EncoderParams or the flat [W0, b0, ...] list of
    tape variables (pass ``spec`` for input-dim checking in that case).
    """
    if isinstance(params, EncoderParams):
        spec = params.spec
        layers = params.tensors()
    else:
        layers = list(params)

    x_cols = x.shape[1] if isinstance(x, Var) else as_tensor(x).shape[1]
    if spec is not None:
        _check_input(spec, x_cols)

    h = x
    depth = len(layers) // 2
    for layer in range(depth):
        h = ops.linear(h, layers[2 * layer], layers[2 * layer + 1])
        if layer < depth - 1:
            h = ops.relu(h)
    return h


def infer(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass in plain numpy (evaluation, benchmarking)."""
    x = as_tensor(x)
    _check_input(params.spec, x.shape[1])
    h = x
    depth = len(params.weights)
    for layer, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        h = h @ weight + bias
        if layer < depth - 1:
            np.maximum(h, 0.0, out=h)
    return h


def count_params(spec: EncoderSpec) -> int:
    """Sum over layers of fan_in * fan_out + fan_out."""
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in spec.layer_shapes)


def estimate_flops(spec: EncoderSpec, batch: int) -> int:
    """Multiply-adds count as 2 FLOPs; activations and biases are ignored."""
    return batch * sum(2 * fan_in * fan_out for fan_in, fan_out in spec.layer_shapes)
