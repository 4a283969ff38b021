"""Dense MLP bottom/top models, logistic loss and AdaGrad.

Gradient convention used throughout: ``upstream`` holds per-instance
derivatives (one row per instance, not divided by the batch size).
``backward`` returns parameter gradients of the batch *mean* and an input
gradient that is again per-instance, so a model below can chain on it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericError, ShapeError
from .numerics import as_matrix, matmul

ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpModel:
    layers: list[Layer]

    @property
    def layout(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    def copy(self) -> MlpModel:
        return MlpModel([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params()])


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]


# One (weight_grad, bias_grad) pair per layer.
Grads = list[tuple[np.ndarray, np.ndarray]]


def flatten_grads(grads: Grads) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for pair in grads for g in pair])


@dataclass
class AdaGradState:
    acc: list[tuple[np.ndarray, np.ndarray]]
    epsilon: float = 1e-10

    @classmethod
    def for_model(cls, model: MlpModel, epsilon: float = 1e-10) -> AdaGradState:
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers], epsilon)

    def copy(self) -> AdaGradState:
        return AdaGradState([(a.copy(), b.copy()) for a, b in self.acc], self.epsilon)


def init_mlp(layout, activations=None, seed=0) -> MlpModel:
    """Xavier-uniform weights, zero biases.

    ``activations`` defaults to ReLU on hidden layers and a linear output.
    """
    layout = [int(d) for d in layout]
    if len(layout) < 2:
        raise ConfigError(f"layout needs at least input and output widths, got {layout}")
    if any(d < 1 for d in layout):
        raise ConfigError(f"layer widths must be positive, got {layout}")
    n_layers = len(layout) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["linear"]
    activations = list(activations)
    if len(activations) != n_layers:
        raise ConfigError(f"{len(activations)} activations for {n_layers} layers")
    for act in activations:
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out, act in zip(layout[:-1], layout[1:], activations):
        limit = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_in, d_out))
        layers.append(Layer(w, np.zeros(d_out), act))
    return MlpModel(layers)


def forward(model: MlpModel, x) -> tuple[np.ndarray, ForwardTrace]:
    x = as_matrix(x, "input")
    if x.shape[1] != model.in_dim:
        raise ShapeError(f"model expects {model.in_dim} input columns, got {x.shape[1]}")
    pre, post = [], []
    h = x
    for layer in model.layers:
        z = matmul(h, layer.weight) + layer.bias
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        pre.append(z)
        post.append(h)
    return h, ForwardTrace(x, pre, post)


def backward(model: MlpModel, trace: ForwardTrace, upstream, row_weights=None) -> tuple[Grads, np.ndarray]:
    """Backpropagate ``upstream`` (B x d_out), optionally scaled per row.

    Parameter gradients are averaged over the B rows (divided by B, not by the
    weight sum), so zero-weighted rows simply drop out of the sum.
    """
    upstream = as_matrix(upstream, "upstream")
    out = trace.post[-1]
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {out.shape}")
    n = upstream.shape[0]
    if row_weights is not None:
        row_weights = np.asarray(row_weights, dtype=np.float64).reshape(-1)
        if row_weights.shape[0] != n:
            raise ShapeError(f"{row_weights.shape[0]} row weights for batch of {n}")
        upstream = upstream * row_weights[:, None]
    grads: Grads = [None] * len(model.layers)  # type: ignore[list-item]
    delta = upstream
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            delta = delta * (trace.pre[k] > 0.0)
        below = trace.post[k - 1] if k > 0 else trace.inputs
        grads[k] = ((below.T @ delta) / n, delta.sum(axis=0) / n)
        delta = delta @ layer.weight.T
    return grads, delta


def logistic_loss(y, logits) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance logistic loss and its derivative w.r.t. the logit."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if y.shape != logits.shape:
        raise ShapeError(f"{y.shape[0]} labels for {logits.shape[0]} logits")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("labels must be 0 or 1")
    signed = (2.0 * y - 1.0) * logits
    loss = np.logaddexp(0.0, -signed)
    return loss, expit(logits) - y


def adagrad_step(model: MlpModel, grads: Grads, state: AdaGradState, lr: float) -> tuple[MlpModel, AdaGradState]:
    """In-place AdaGrad update of ``model`` and ``state``; returns both."""
    if len(grads) != len(model.layers):
        raise ShapeError(f"{len(grads)} gradient pairs for {len(model.layers)} layers")
    for k, (layer, (gw, gb)) in enumerate(zip(model.layers, grads)):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"layer {k}: gradient shapes {gw.shape}/{gb.shape} do not match parameters")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient in layer {k}")
    for layer, (gw, gb), (aw, ab) in zip(model.layers, grads, state.acc):
        aw += gw * gw
        ab += gb * gb
        layer.weight -= lr * gw / (np.sqrt(aw) + state.epsilon)
        layer.bias -= lr * gb / (np.sqrt(ab) + state.epsilon)
    return model, state
