"""
Feedforward Network Kernel
Dense layers with GELU activations, dropout and exact reverse-mode gradients,
sized for networks of a few thousand parameters
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ConfigurationError, NumericalError


ACTIVATIONS = ('gelu', 'identity')
GELU_SLOPE = 1.702


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branch form keeps exp() arguments nonpositive
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(v: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Numerically stable logistic function"""
    out = _sigmoid(np.asarray(v, dtype=float))
    return float(out) if out.ndim == 0 else out


def gelu(v: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """GELU approximation v * sigmoid(1.702 v)"""
    v = np.asarray(v, dtype=float)
    out = v * _sigmoid(GELU_SLOPE * v)
    return float(out) if out.ndim == 0 else out


def gelu_grad(v: np.ndarray) -> np.ndarray:
    s = _sigmoid(GELU_SLOPE * v)
    return s + GELU_SLOPE * v * s * (1.0 - s)


def softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def _activate(v: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'gelu':
        return v * _sigmoid(GELU_SLOPE * v)
    return v


def _activation_grad(v: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'gelu':
        return gelu_grad(v)
    return np.ones_like(v)


def sum_to_shape(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its parameter"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class LayerParams:
    """
    One dense layer: weights (D_out x D_in), biases and activation.

    Biases are a D_out vector; leading batch dimensions are accepted so that
    per-response random offsets broadcast over the rows of a window.
    """

    weights: np.ndarray
    biases: np.ndarray
    activation: str = 'gelu'

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{self.activation}'")
        if self.weights.ndim != 2 or self.weights.shape[0] < 1:
            raise ConfigurationError(f"Layer weights must be D_out x D_in with D_out >= 1, got {self.weights.shape}")
        if self.biases.ndim < 1 or self.biases.shape[-1] != self.weights.shape[0]:
            raise ConfigurationError(
                f"Bias width {self.biases.shape} does not match weight rows {self.weights.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise NumericalError("Non-finite layer parameters")

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass
class DropoutMask:
    """Keep indicators for every hidden layer of one network"""

    keep: List[np.ndarray]
    rate: float

    @property
    def scale(self) -> float:
        return 1.0 / (1.0 - self.rate)


@dataclass
class ActivationTrace:
    """Per-layer values recorded by ffn_forward for the backward pass"""

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    post: List[np.ndarray]
    masks: Optional[DropoutMask] = None

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class GradientBuffer:
    """Gradients of a scalar loss w.r.t. every layer and the network input"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def squared_norm(self) -> float:
        return float(sum(np.sum(g ** 2) for g in self.weights) + sum(np.sum(g ** 2) for g in self.biases))


def hidden_widths(layers: Sequence[LayerParams]) -> List[int]:
    """Widths of the layers that receive dropout (all but the output layer)"""
    return [layer.width for layer in layers[:-1]]


def ffn_forward(layers: Sequence[LayerParams], inputs: np.ndarray,
                masks: Optional[DropoutMask] = None) -> ActivationTrace:
    """
    Apply f(l) = act(W f(l-1) + b) layer by layer

    Args:
        layers: Network layers, input to output
        inputs: Array whose last axis has length D_0
        masks: Optional dropout masks, one per hidden layer

    Returns:
        Activation trace; trace.output is the network output
    """
    if not layers:
        raise ConfigurationError("Network has no layers")
    h = np.asarray(inputs, dtype=float)
    if masks is not None and len(masks.keep) != len(layers) - 1:
        raise ConfigurationError(
            f"Dropout mask has {len(masks.keep)} layers, network has {len(layers) - 1} hidden layers"
        )

    trace = ActivationTrace(inputs=[], pre=[], post=[], masks=masks)
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.fan_in:
            raise ConfigurationError(f"Layer {i} expects input width {layer.fan_in}, got {h.shape[-1]}")
        z = h @ layer.weights.T + layer.biases
        a = _activate(z, layer.activation)
        if masks is not None and i < last:
            keep = masks.keep[i]
            if keep.shape[-1] != layer.width:
                raise ConfigurationError(f"Dropout mask width {keep.shape[-1]} != layer width {layer.width}")
            a = a * (keep * masks.scale)
        trace.inputs.append(h)
        trace.pre.append(z)
        trace.post.append(a)
        h = a
    return trace


def ffn_backward(layers: Sequence[LayerParams], trace: ActivationTrace,
                 upstream_grad: np.ndarray) -> GradientBuffer:
    """
    Reverse-mode gradients of <upstream_grad, output>; masks act as constants

    Args:
        layers: The layers used to produce the trace
        trace: Result of ffn_forward
        upstream_grad: Gradient of the loss w.r.t. the network output

    Returns:
        GradientBuffer summed over all batch axes
    """
    if len(trace.pre) != len(layers):
        raise ConfigurationError(f"Trace has {len(trace.pre)} layers, network has {len(layers)}")
    g = np.asarray(upstream_grad, dtype=float)
    if g.shape != trace.output.shape:
        raise ConfigurationError(f"Upstream gradient shape {g.shape} != output shape {trace.output.shape}")

    n_layers = len(layers)
    weight_grads: List[np.ndarray] = [None] * n_layers
    bias_grads: List[np.ndarray] = [None] * n_layers
    for i in reversed(range(n_layers)):
        layer = layers[i]
        if trace.masks is not None and i < n_layers - 1:
            g = g * (trace.masks.keep[i] * trace.masks.scale)
        delta = g * _activation_grad(trace.pre[i], layer.activation)
        inp = trace.inputs[i]
        weight_grads[i] = delta.reshape(-1, delta.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
        bias_grads[i] = sum_to_shape(delta, layer.biases.shape)
        g = delta @ layer.weights
    return GradientBuffer(weights=weight_grads, biases=bias_grads, inputs=g)


def sample_dropout_mask(rate: float, widths: Sequence[int], rng: np.random.Generator,
                        shape: Tuple[int, ...] = ()) -> DropoutMask:
    """
    Draw independent Bernoulli(1 - rate) keep indicators

    Args:
        rate: Drop probability in [0, 1)
        widths: Hidden layer widths
        rng: Seeded generator
        shape: Leading batch shape; () shares one mask across all inputs

    Returns:
        DropoutMask with one indicator array per width
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"Dropout rate must lie in [0, 1), got {rate}")
    keep = [(rng.random(tuple(shape) + (int(w),)) >= rate).astype(float) for w in widths]
    return DropoutMask(keep=keep, rate=float(rate))


def l2_penalty(layers: Sequence[LayerParams], strength: float) -> Tuple[float, List[np.ndarray]]:
    """
    strength * mean of squared weights (biases excluded)

    Returns:
        (penalty, per-layer weight gradients)
    """
    if strength < 0:
        raise ConfigurationError(f"L2 strength must be nonnegative, got {strength}")
    count = sum(layer.weights.size for layer in layers)
    if count == 0 or strength == 0:
        return 0.0, [np.zeros_like(layer.weights) for layer in layers]
    total = sum(float(np.sum(layer.weights ** 2)) for layer in layers)
    grads = [2.0 * strength * layer.weights / count for layer in layers]
    return strength * total / count, grads


def glorot_init(sizes: Sequence[int], rng: np.random.Generator,
                output_activation: str = 'identity') -> List[LayerParams]:
    """
    Glorot-uniform weights and zero biases

    Args:
        sizes: [D_0, D_1, ..., D_L]
        rng: Seeded generator
        output_activation: Activation of the final layer (hidden layers use GELU)
    """
    layers = []
    for i in range(1, len(sizes)):
        fan_in, fan_out = int(sizes[i - 1]), int(sizes[i])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = output_activation if i == len(sizes) - 1 else 'gelu'
        layers.append(LayerParams(weights=weights, biases=np.zeros(fan_out), activation=activation))
    return layers
