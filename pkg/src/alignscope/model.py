"""Fully connected networks ``z(x) = W_L phi(... phi(W_1 x))`` with exact per-example gradients.

Weights are stored as ``(out, in)`` matrices so a layer acts as ``W @ x``.
Batches are row-major ``(n, features)`` arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import InvalidParameterError, NumericError, ShapeError
from .numkit import Rng, init_gaussian, init_glorot_uniform


class Activation(enum.Enum):
    SIN = "sin"
    RELU = "relu"
    LINEAR = "linear"
    SIGMOID = "sigmoid"

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self is Activation.SIN:
            return np.sin(u)
        if self is Activation.RELU:
            return np.maximum(u, 0.0)
        if self is Activation.LINEAR:
            return u.copy()
        return _sigmoid(u)

    def derivative(self, u: np.ndarray) -> np.ndarray:
        if self is Activation.SIN:
            return np.cos(u)
        if self is Activation.RELU:
            # subgradient 0 at exactly 0
            return (u > 0.0).astype(np.float64)
        if self is Activation.LINEAR:
            return np.ones_like(u)
        s = _sigmoid(u)
        return s * (1.0 - s)


def _sigmoid(u):
    # split by sign so exp never overflows
    out = np.empty_like(u, dtype=np.float64)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidParameterError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class Hinge:
    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise InvalidParameterError(f"margin must be > 0, got {self.margin}")


@dataclass(frozen=True)
class Squared:
    pass


Loss = Union[SoftmaxCrossEntropy, Hinge, Squared]


def make_loss(name: str, temperature: float = 1.0, margin: float = 1.0) -> Loss:
    name = name.lower().replace("-", "_")
    if name in ("softmax", "softmax_ce", "softmax_cross_entropy", "cross_entropy"):
        return SoftmaxCrossEntropy(temperature)
    if name == "hinge":
        return Hinge(margin)
    if name in ("squared", "mse", "l2"):
        return Squared()
    raise InvalidParameterError(f"unknown loss {name!r}")


@dataclass(frozen=True)
class ModelParams:
    """Weights (and optional biases) of an MLP; ``layers[-1]`` is the top layer."""

    layers: tuple
    activation: Activation
    biases: tuple | None = None

    def __post_init__(self):
        layers = tuple(np.asarray(w, dtype=np.float64) for w in self.layers)
        if not layers:
            raise ShapeError("a model needs at least one layer")
        for l in range(1, len(layers)):
            if layers[l].shape[1] != layers[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l} expects {layers[l].shape[1]} inputs but layer {l - 1} "
                    f"produces {layers[l - 1].shape[0]}"
                )
        object.__setattr__(self, "layers", layers)
        if self.biases is not None:
            biases = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
            if len(biases) != len(layers) or any(
                b.shape != (w.shape[0],) for b, w in zip(biases, layers)
            ):
                raise ShapeError("one bias vector per layer, matching layer output size")
            object.__setattr__(self, "biases", biases)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.layers[0].shape[0]

    def num_parameters(self) -> int:
        n = sum(w.size for w in self.layers)
        if self.biases is not None:
            n += sum(b.size for b in self.biases)
        return n


def init_params(
    sizes: Sequence[int],
    activation: Activation,
    sigma: float,
    rng: Rng,
    bias: bool = False,
) -> ModelParams:
    """First layer ~ Normal(0, sigma^2); every other layer Glorot uniform.

    ``sizes`` is ``[p, h_1, ..., k]``; two entries past the input give the
    standard two-layer net.
    """
    if len(sizes) < 2:
        raise InvalidParameterError("sizes needs an input and an output dimension")
    layers = []
    for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        stream = rng.child(f"layer{l}")
        if l == 0:
            layers.append(init_gaussian(fan_out, fan_in, sigma, stream))
        else:
            layers.append(init_glorot_uniform(fan_out, fan_in, stream))
    biases = tuple(np.zeros(s) for s in sizes[1:]) if bias else None
    return ModelParams(tuple(layers), activation, biases)


@dataclass(frozen=True)
class ForwardTrace:
    # activations[0] is the input, activations[l] the output of hidden layer l
    activations: tuple
    preactivations: tuple
    logits: np.ndarray

    @property
    def representations(self) -> np.ndarray:
        """Hidden representation feeding the top layer (``phi(W_1 x)`` for two layers)."""
        return self.activations[-1]


def _check_inputs(params: ModelParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match input dimension {params.input_dim}")
    return x


def forward(params: ModelParams, inputs) -> ForwardTrace:
    a = _check_inputs(params, inputs)
    acts, pres = [a], []
    phi = params.activation
    last = len(params.layers) - 1
    for l, w in enumerate(params.layers):
        u = a @ w.T
        if params.biases is not None:
            u = u + params.biases[l]
        if l == last:
            return ForwardTrace(tuple(acts), tuple(pres), u)
        pres.append(u)
        a = phi(u)
        acts.append(a)
    raise AssertionError("unreachable")


def batch_loss_and_logit_grad(loss: Loss, logits, labels):
    """Per-example losses ``(n,)`` and logit gradients ``(n, k)``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} and labels {y.shape} disagree")
    n, k = z.shape
    if k < 2:
        raise ShapeError("need at least two classes")
    if n and (y.min() < 0 or y.max() >= k):
        raise InvalidParameterError(f"labels must lie in [0, {k})")
    finite = np.isfinite(z).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NumericError(f"non-finite logits for example {bad}", index=bad)
    rows = np.arange(n)

    if isinstance(loss, SoftmaxCrossEntropy):
        t = loss.temperature
        u = z / t
        u = u - u.max(axis=1, keepdims=True)
        e = np.exp(u)
        s = e.sum(axis=1, keepdims=True)
        p = e / s
        values = np.log(s[:, 0]) - u[rows, y]
        grad = p
        grad[rows, y] -= 1.0
        grad /= t
    elif isinstance(loss, Hinge):
        m = loss.margin + z - z[rows, y][:, None]
        m[rows, y] = 0.0
        active = m > 0.0
        values = np.where(active, m, 0.0).sum(axis=1)
        grad = active.astype(np.float64)
        grad[rows, y] = -active.sum(axis=1)
    elif isinstance(loss, Squared):
        diff = z.copy()
        diff[rows, y] -= 1.0
        values = 0.5 * np.einsum("ij,ij->i", diff, diff)
        grad = diff
    else:
        raise InvalidParameterError(f"unknown loss {loss!r}")
    return values, grad


def loss_and_logit_grad(loss: Loss, logits, label: int):
    """Loss value and gradient with respect to the logits for a single example."""
    values, grad = batch_loss_and_logit_grad(loss, np.asarray(logits, dtype=np.float64)[None, :], [label])
    return float(values[0]), grad[0]


SCOPES = ("logit", "hidden", "top", "whole")


@dataclass(frozen=True)
class PerExampleGrads:
    """Exact per-example gradients, kept in factored form.

    A dense layer's per-example weight gradient is the outer product
    ``deltas[l][i] (x) inputs[l][i]``, so only the two factors are stored.
    ``layer_grads`` materializes ``(n, out, in)`` on demand and ``gram``
    gives every pairwise inner product without materializing anything.
    """

    losses: np.ndarray
    logit_grads: np.ndarray
    labels: np.ndarray
    deltas: tuple
    inputs: tuple
    has_bias: bool = False

    @property
    def n(self) -> int:
        return self.losses.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.deltas)

    def layer_grads(self, l: int) -> np.ndarray:
        return np.einsum("no,ni->noi", self.deltas[l], self.inputs[l])

    def bias_grads(self, l: int) -> np.ndarray:
        return self.deltas[l]

    def mean_layer_grad(self, l: int) -> np.ndarray:
        return self.deltas[l].T @ self.inputs[l] / self.n

    def mean_grads(self) -> list:
        return [self.mean_layer_grad(l) for l in range(self.num_layers)]

    def mean_bias_grads(self) -> list | None:
        if not self.has_bias:
            return None
        return [d.mean(axis=0) for d in self.deltas]

    def _scope_layers(self, scope: str):
        if scope == "hidden":
            return [0]
        if scope == "top":
            return [self.num_layers - 1]
        if scope == "whole":
            return list(range(self.num_layers))
        raise InvalidParameterError(f"unknown scope {scope!r}; expected one of {SCOPES}")

    def flat(self, scope: str = "whole") -> np.ndarray:
        """Materialized ``(n, D)`` gradients for a layer scope."""
        if scope == "logit":
            return self.logit_grads.copy()
        parts = []
        for l in self._scope_layers(scope):
            parts.append(self.layer_grads(l).reshape(self.n, -1))
            if self.has_bias and scope == "whole":
                parts.append(self.deltas[l])
        return np.concatenate(parts, axis=1)

    def gram(self, scope: str = "whole") -> np.ndarray:
        """``K[i, j] = <grad_i, grad_j>`` restricted to ``scope``."""
        if scope == "logit":
            return self.logit_grads @ self.logit_grads.T
        k = np.zeros((self.n, self.n))
        for l in self._scope_layers(scope):
            k += self.layer_gram(l, with_bias=scope == "whole")
        return k

    def layer_gram(self, l: int, with_bias: bool = False) -> np.ndarray:
        """Gram matrix of layer ``l``'s weight gradients, plus its bias gradients if asked."""
        dd = self.deltas[l] @ self.deltas[l].T
        k = dd * (self.inputs[l] @ self.inputs[l].T)
        if with_bias and self.has_bias:
            k += dd
        return k


def per_example_backward(params: ModelParams, inputs, labels, loss: Loss) -> PerExampleGrads:
    x = _check_inputs(params, inputs)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} inputs but labels of shape {y.shape}")
    trace = forward(params, x)
    for a in trace.activations[1:] + (trace.logits,):
        bad = ~np.isfinite(a).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite forward value for example {i}", index=i)
    values, dz = batch_loss_and_logit_grad(loss, trace.logits, y)

    num = len(params.layers)
    deltas = [None] * num
    deltas[-1] = dz
    for l in range(num - 1, 0, -1):
        back = deltas[l] @ params.layers[l]
        deltas[l - 1] = back * params.activation.derivative(trace.preactivations[l - 1])
    for l, d in enumerate(deltas):
        bad = ~np.isfinite(d).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise NumericError(f"non-finite gradient in layer {l} for example {i}", index=i)
    return PerExampleGrads(
        losses=values,
        logit_grads=dz,
        labels=y,
        deltas=tuple(deltas),
        inputs=tuple(trace.activations),
        has_bias=params.biases is not None,
    )


def sgd_step(
    params: ModelParams,
    mean_grads: Sequence[np.ndarray],
    lr_per_layer: Sequence[float],
    bias_grads: Sequence[np.ndarray] | None = None,
) -> ModelParams:
    """``W_l <- W_l - lr_l * grad_l``; a zero learning rate leaves the layer untouched."""
    if len(mean_grads) != len(params.layers) or len(lr_per_layer) != len(params.layers):
        raise ShapeError("need one gradient and one learning rate per layer")
    new_layers = []
    for w, g, lr in zip(params.layers, mean_grads, lr_per_layer):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match weight shape {w.shape}")
        if lr < 0:
            raise InvalidParameterError(f"learning rate must be >= 0, got {lr}")
        new_layers.append(w if lr == 0 else w - lr * g)
    new_biases = params.biases
    if params.biases is not None and bias_grads is not None:
        new_biases = tuple(
            b if lr == 0 else b - lr * np.asarray(g) for b, g, lr in zip(params.biases, bias_grads, lr_per_layer)
        )
    return ModelParams(tuple(new_layers), params.activation, new_biases)


def predict(params: ModelParams, inputs, batch_size: int = 4096) -> np.ndarray:
    x = _check_inputs(params, inputs)
    out = [forward(params, x[i : i + batch_size]).logits.argmax(axis=1) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(params: ModelParams, inputs, labels) -> float:
    y = np.asarray(labels)
    if y.size == 0:
        return float("nan")
    return float(np.mean(predict(params, inputs) == y))
