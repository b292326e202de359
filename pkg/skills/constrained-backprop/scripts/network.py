#!/usr/bin/env python3
"""
Dense feedforward network with manual forward and backward passes

Layers are affine maps y = x W^T + b followed by ReLU or nothing; the loss is
mean softmax cross-entropy. In quantized mode every constrained layer runs
its forward pass on ste_quantize(W) while the backward pass hands the
gradient straight through to the real-valued W. Biases are never quantized.

Usage:
    from network import init_network, forward, loss, backward

    net = init_network([2, 16, 16, 2], seed=7)
    logits, trace = forward(net, x)
    c = loss(logits, y)
    grads = backward(net, trace, y)
"""

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from constraint import ConstraintKind, QuantGrid
from ndcore import add_row_bias, as_matrix, matmul
from quantizer import LayerQuantConfig, hard_project, ste_backward, ste_quantize
from utils import ContractError, DomainError, ShapeError

ACTIVATIONS = ("relu", "none")
MODES = ("quantized", "full-precision")


@dataclass
class DenseLayer:
    """One affine layer; W has shape (out, in)"""

    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"
    quant: LayerQuantConfig = field(default_factory=LayerQuantConfig)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"Unknown activation '{self.activation}'")
        self.W = as_matrix(self.W)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias shape {self.b.shape} does not match W {self.W.shape}")

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]


@dataclass
class Network:
    """
    Ordered list of dense layers

    version increases every time weights are modified in place; traces
    remember the version they were recorded at.
    """

    layers: List[DenseLayer]
    version: int = 0

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i].fan_in != self.layers[i - 1].fan_out:
                raise ShapeError(
                    f"layer {i} expects {self.layers[i].fan_in} inputs but layer "
                    f"{i - 1} produces {self.layers[i - 1].fan_out}"
                )

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].fan_out

    def constrained_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if not layer.quant.exempt]

    def n_constrained(self) -> int:
        return sum(self.layers[i].W.size for i in self.constrained_indices())

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "Network":
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    """Per-layer cache of one forward pass"""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    weights: List[np.ndarray]
    mode: str
    network_id: int
    version: int


@dataclass
class Gradients:
    dW: List[np.ndarray]
    db: List[np.ndarray]


def init_network(
    sizes: Sequence[int],
    seed: int = 0,
    activation: str = "relu",
    kind: Optional[ConstraintKind] = None,
    scale_policy: str = "frozen",
    quantize_first_last: bool = False,
) -> Network:
    """
    Seeded network with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights

    Args:
        sizes: layer widths, input first, classes last
        seed: generator seed
        activation: hidden activation; the output layer has none
        kind: constraint kind of the constrained layers (ternary default)
        scale_policy: frozen or recompute
        quantize_first_last: also constrain the first and last layers

    Returns:
        Network whose first and last layers are exempt unless requested
    """
    if len(sizes) < 2:
        raise DomainError("a network needs at least an input and an output size")
    kind = kind or ConstraintKind("ternary")
    rng = np.random.default_rng(seed)
    n_layers = len(sizes) - 1
    layers = []
    for i in range(n_layers):
        fan_in, fan_out = int(sizes[i]), int(sizes[i + 1])
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        edge = i == 0 or i == n_layers - 1
        quant = LayerQuantConfig(
            exempt=edge and not quantize_first_last,
            kind=kind,
            scale_policy=scale_policy,
        )
        act = "none" if i == n_layers - 1 else activation
        layers.append(DenseLayer(W=W, b=b, activation=act, quant=quant))
    return Network(layers=layers)


def _effective_weights(net: Network, mode: str,
                       grids: Optional[Sequence[Optional[QuantGrid]]]) -> List[np.ndarray]:
    if mode not in MODES:
        raise DomainError(f"Unknown forward mode '{mode}'")
    if mode == "full-precision":
        return [layer.W for layer in net.layers]
    if grids is None or len(grids) != len(net.layers):
        raise ContractError("quantized forward needs one grid entry per layer")
    weights = []
    for i, layer in enumerate(net.layers):
        if layer.quant.exempt:
            weights.append(layer.W)
            continue
        if grids[i] is None:
            raise ContractError(f"layer {i} is constrained but has no grid")
        weights.append(ste_quantize(layer.W, grids[i]))
    return weights


def forward(net: Network, batch, mode: str = "full-precision",
            grids: Optional[Sequence[Optional[QuantGrid]]] = None) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Forward pass

    Args:
        net: network
        batch: (B, n_in) inputs
        mode: quantized or full-precision
        grids: per-layer grids (None for exempt layers), needed in quantized mode

    Returns:
        (logits, trace)
    """
    x = as_matrix(batch)
    if x.shape[1] != net.layers[0].fan_in:
        raise ShapeError(
            f"batch has {x.shape[1]} features, network expects {net.layers[0].fan_in}"
        )
    weights = _effective_weights(net, mode, grids)

    inputs, pre = [], []
    a = x
    for layer, W in zip(net.layers, weights):
        inputs.append(a)
        z = add_row_bias(matmul(a, W.T), layer.b)
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z

    trace = ForwardTrace(
        inputs=inputs,
        pre_activations=pre,
        weights=weights,
        mode=mode,
        network_id=id(net),
        version=net.version,
    )
    return a, trace


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def loss(logits, labels) -> float:
    """Mean softmax cross-entropy over the batch"""
    logits = as_matrix(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = log_softmax(logits)
    return float(-logp[np.arange(logits.shape[0]), labels].mean())


def backward(net: Network, trace: ForwardTrace, labels) -> Gradients:
    """
    Gradients of the mean cross-entropy with respect to every W and b

    Quantized layers pass the gradient through the quantizer unchanged.

    Raises:
        ContractError: trace recorded on another network or before an update
    """
    if trace.network_id != id(net) or trace.version != net.version:
        raise ContractError("stale forward trace: weights changed since the forward pass")

    logits = trace.pre_activations[-1]
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    batch = logits.shape[0]

    delta = softmax(logits)
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch

    n = len(net.layers)
    dW: List[Optional[np.ndarray]] = [None] * n
    db: List[Optional[np.ndarray]] = [None] * n
    for i in reversed(range(n)):
        layer = net.layers[i]
        if layer.activation == "relu":
            delta = delta * (trace.pre_activations[i] > 0.0)
        grad_wq = matmul(delta.T, trace.inputs[i])
        dW[i] = ste_backward(grad_wq) if trace.mode == "quantized" and not layer.quant.exempt \
            else grad_wq
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = matmul(delta, trace.weights[i])
    return Gradients(dW=dW, db=db)


def accuracy(logits, labels) -> float:
    """Top-1 accuracy"""
    logits = as_matrix(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def project_network(net: Network, grids: Sequence[Optional[QuantGrid]]) -> Network:
    """Copy of net whose constrained layers hold hard-projected weights"""
    projected = net.copy()
    for i, layer in enumerate(projected.layers):
        if not layer.quant.exempt:
            layer.W = hard_project(layer.W, grids[i])
    projected.touch()
    return projected
