"""Dense feed-forward networks trained with minibatch SGD.

This is the only place in the package that touches gradients.  Networks
are small (a handful of dense layers), activations are relu or identity,
and the final layer is always linear so its input can serve as the
pre-logit embedding.  One layer is designated as the tap: its
post-activation output is the intermediate feature map that downstream
expert networks consume.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import DataError, ShapeError

ACTIVATIONS = ("relu", "identity")

PROB_FLOOR = 1e-12


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Network:
    """A dense feed-forward classifier.

    ``tap_index`` names the layer whose post-activation output is exposed
    as the intermediate feature map.  The final layer must be linear;
    its input is the pre-logit embedding.
    """

    layers: list[Layer]
    tap_index: int

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.weight.ndim != 2 or layer.bias.ndim != 1:
                raise ShapeError(f"layer {i}: weight must be 2-d and bias 1-d")
            if layer.weight.shape[0] != layer.bias.shape[0]:
                raise ShapeError(
                    f"layer {i}: weight rows {layer.weight.shape[0]} != bias size {layer.bias.shape[0]}"
                )
            if i > 0 and layer.in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i}: input dim {layer.in_dim} does not chain with "
                    f"previous output dim {self.layers[i - 1].out_dim}"
                )
        if self.layers[-1].activation != "identity":
            raise ShapeError("final layer must be linear")
        if not 0 <= self.tap_index < len(self.layers):
            raise ShapeError(f"tap_index {self.tap_index} out of range for {len(self.layers)} layers")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def prelogit_dim(self) -> int:
        return self.layers[-1].in_dim

    @property
    def tap_dim(self) -> int:
        return self.layers[self.tap_index].out_dim

    def copy(self) -> "Network":
        return Network(
            layers=[Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            tap_index=self.tap_index,
        )


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 5.0
    seed: int = 0


@dataclass
class ForwardPass:
    tap: np.ndarray
    prelogits: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def forward_batch(net: Network, x: np.ndarray) -> ForwardPass:
    """Run a [B, in_dim] batch through the net.

    Returns the tap feature map, the pre-logit embedding (input to the
    final layer), raw logits, and softmax probabilities.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of shape [B, {net.input_dim}], got {x.shape}")
    a = x
    tap = None
    prelogits = None
    for i, layer in enumerate(net.layers):
        if i == len(net.layers) - 1:
            prelogits = a
        z = a @ layer.weight.T + layer.bias
        a = _activate(z, layer.activation)
        if i == net.tap_index:
            tap = a
    logits = a
    return ForwardPass(tap=tap, prelogits=prelogits, logits=logits, probs=softmax(logits))


def forward(net: Network, x: np.ndarray) -> ForwardPass:
    """Single-sample forward pass; returns 1-d arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d feature vector, got shape {x.shape}")
    out = forward_batch(net, x[None, :])
    return ForwardPass(out.tap[0], out.prelogits[0], out.logits[0], out.probs[0])


def weighted_nll(probs: np.ndarray, label: int, weight: float) -> float:
    """-weight * log p(label), with the probability clamped at 1e-12."""
    if not 0 <= label < probs.shape[-1]:
        raise ShapeError(f"label {label} out of range for {probs.shape[-1]} classes")
    if weight < 0:
        raise ValueError("weight must be non-negative")
    return float(-weight * np.log(max(probs[label], PROB_FLOOR)))


def nll_batch(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Mean weighted negative log-likelihood over a batch."""
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-weights * np.log(np.maximum(picked, PROB_FLOOR))))


def dataset_loss(net: Network, x: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    return nll_batch(forward_batch(net, x).probs, labels, weights)


def backward(
    net: Network, x: np.ndarray, labels: np.ndarray, weights: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradients of the mean weighted NLL over the batch.

    Returns one (d_weight, d_bias) pair per layer.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot compute gradients on an empty batch")

    # Forward, keeping pre-activations for the relu mask.
    acts = [x]
    pre = []
    a = x
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _activate(z, layer.activation)
        acts.append(a)
    probs = softmax(acts[-1])

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    delta = (probs - onehot) * weights[:, None] / n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = delta @ net.layers[i].weight
            if net.layers[i - 1].activation == "relu":
                delta = delta * (pre[i - 1] > 0)
    return grads


class SgdStepper:
    """Momentum SGD state shared by the epoch and stream training loops."""

    def __init__(self, net: Network, cfg: SgdConfig):
        self.cfg = cfg
        self.velocity = [
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers
        ]

    def learning_rate(self, epoch: int) -> float:
        decays = sum(1 for e in self.cfg.lr_decay_epochs if epoch >= e)
        return self.cfg.learning_rate / (self.cfg.lr_decay_factor**decays)

    def step(
        self,
        net: Network,
        grads: list[tuple[np.ndarray, np.ndarray]],
        lr: float,
        frozen_prefix: int = 0,
    ) -> None:
        for i in range(frozen_prefix, len(net.layers)):
            vw, vb = self.velocity[i]
            gw, gb = grads[i]
            vw *= self.cfg.momentum
            vw += gw
            vb *= self.cfg.momentum
            vb += gb
            net.layers[i].weight -= lr * vw
            net.layers[i].bias -= lr * vb


def _check_training_args(
    net: Network, x: np.ndarray, labels: np.ndarray, weights: np.ndarray, frozen_prefix: int
) -> None:
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected features of shape [N, {net.input_dim}], got {x.shape}")
    if x.shape[0] == 0:
        raise DataError("cannot train on an empty dataset")
    if labels.shape != (x.shape[0],) or weights.shape != (x.shape[0],):
        raise ShapeError("labels and weights must be 1-d arrays matching the feature count")
    if labels.min() < 0 or labels.max() >= net.output_dim:
        raise ShapeError(f"labels out of range for {net.output_dim} outputs")
    if np.any(weights < 0):
        raise ValueError("per-sample weights must be non-negative")
    if not 0 <= frozen_prefix <= net.tap_index + 1:
        raise ValueError(
            f"frozen_prefix {frozen_prefix} must lie in [0, tap_index + 1 = {net.tap_index + 1}]"
        )


def sgd_train(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    cfg: SgdConfig,
    frozen_prefix: int = 0,
) -> Network:
    """Train a private copy of the net; the input network is untouched.

    Epochs iterate over a seeded shuffle of the data in batches of
    cfg.batch_size (last batch may be short).  Layers with index below
    frozen_prefix keep their parameters bit-identical to the input.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    _check_training_args(net, x, labels, weights, frozen_prefix)

    out = net.copy()
    stepper = SgdStepper(out, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = stepper.learning_rate(epoch)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grads = backward(out, x[idx], labels[idx], weights[idx])
            stepper.step(out, grads, lr, frozen_prefix)
    return out


def init_network(
    layer_dims: list[int],
    tap_index: int,
    seed: int,
    activations: list[str] | None = None,
) -> Network:
    """Fresh network with uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases.

    layer_dims chains input through hidden sizes to the class count,
    e.g. [4, 8, 3] builds a relu hidden layer and a linear output layer.
    """
    if len(layer_dims) < 2:
        raise ShapeError("layer_dims needs at least an input and an output size")
    num_layers = len(layer_dims) - 1
    if activations is None:
        activations = ["relu"] * (num_layers - 1) + ["identity"]
    if len(activations) != num_layers:
        raise ShapeError(f"expected {num_layers} activations, got {len(activations)}")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(num_layers):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(weight=weight, bias=np.zeros(fan_out), activation=activations[i]))
    return Network(layers=layers, tap_index=tap_index)


def network_to_doc(net: Network) -> dict:
    """JSON-ready dict for a network; weights flattened row-major per layer."""
    return {
        "format_version": 1,
        "layer_dims": [net.input_dim] + [l.out_dim for l in net.layers],
        "activations": [l.activation for l in net.layers],
        "tap_index": net.tap_index,
        "weights": [l.weight.reshape(-1) for l in net.layers],
        "biases": [l.bias for l in net.layers],
    }


def network_from_doc(doc: dict) -> Network:
    jsonio.check_format_version(doc, 1, "network checkpoint")
    dims = doc["layer_dims"]
    layers = []
    for i, activation in enumerate(doc["activations"]):
        out_dim, in_dim = dims[i + 1], dims[i]
        weight = np.asarray(doc["weights"][i], dtype=np.float64).reshape(out_dim, in_dim)
        bias = np.asarray(doc["biases"][i], dtype=np.float64)
        layers.append(Layer(weight=weight, bias=bias, activation=activation))
    return Network(layers=layers, tap_index=doc["tap_index"])


def save_network(path: str | Path, net: Network) -> None:
    jsonio.save_json(path, network_to_doc(net))


def load_network(path: str | Path) -> Network:
    return network_from_doc(jsonio.load_json(path))
