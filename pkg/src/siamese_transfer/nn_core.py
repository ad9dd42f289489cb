"""Small dense feedforward networks in float64 numpy.

A network is a plain list of :class:`DenseLayer`. ``forward`` keeps every
layer's input and pre-activation so ``backward`` can run reverse mode
without a graph. Inputs may be a single vector ``(in_dim,)`` or a batch
``(n, in_dim)``; batched gradients are summed over rows.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, NumericInstabilityError, ShapeError


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SIGMOID:
        return _sigmoid(z)
    return z.copy()


def activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation, given pre- and post-values."""
    if kind is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is Activation.SIGMOID:
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ShapeError("weights must be 2-D and biases 1-D")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ShapeError(
                f"weights have {self.weights.shape[0]} rows but biases "
                f"have length {self.biases.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation)


class LayerGrad(NamedTuple):
    weights: np.ndarray
    biases: np.ndarray


class LayerCache(NamedTuple):
    inputs: np.ndarray
    pre: np.ndarray
    post: np.ndarray


@dataclass(frozen=True)
class FreezeMask:
    """Freeze the first ``frozen_layer_count`` layers (input side first)."""

    frozen_layer_count: int = 0

    def __post_init__(self):
        if self.frozen_layer_count < 0:
            raise ConfigError("frozen_layer_count must be >= 0")

    def is_frozen(self, layer_index: int) -> bool:
        return layer_index < self.frozen_layer_count


@dataclass
class OptimizerState:
    """Adam moments, one (weights, biases) pair per layer."""

    first: list
    second: list
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[DenseLayer], learning_rate=1e-3,
                   beta1=0.9, beta2=0.999, epsilon=1e-8) -> "OptimizerState":
        if learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        zeros = lambda: [LayerGrad(np.zeros_like(l.weights), np.zeros_like(l.biases))
                         for l in params]
        return cls(zeros(), zeros(), 0, learning_rate, beta1, beta2, epsilon)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def init_params(layer_dims: Sequence[int], seed: int,
                activations: Sequence[Activation | str] | None = None) -> list[DenseLayer]:
    """Uniform fan-in scaled weights and zero biases.

    ``layer_dims`` lists widths from input to output, so ``[64, 32]`` is a
    single 64->32 layer. ReLU layers draw from U(+-sqrt(6/fan_in)); sigmoid
    and identity layers use the Glorot bound sqrt(6/(fan_in+fan_out)).
    """
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"layer_dims must hold >= 2 positive integers, got {dims}")
    n_layers = len(dims) - 1
    if activations is None:
        activations = [Activation.RELU] * n_layers
    if len(activations) != n_layers:
        raise ConfigError(f"expected {n_layers} activations, got {len(activations)}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        act = Activation(act)
        if act is Activation.RELU:
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return layers


def forward(params: Sequence[DenseLayer], inputs: np.ndarray) -> list[LayerCache]:
    """Evaluate the network, returning one cache entry per layer.

    The network output is ``forward(...)[-1].post``.
    """
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim not in (1, 2):
        raise ShapeError("inputs must be a vector or a 2-D batch")
    caches = []
    for i, layer in enumerate(params):
        if a.shape[-1] != layer.in_dim:
            raise ShapeError(
                f"layer {i} expects {layer.in_dim} inputs, got {a.shape[-1]}"
            )
        z = a @ layer.weights.T + layer.biases
        out = activate(layer.activation, z)
        caches.append(LayerCache(a, z, out))
        a = out
    return caches


def output(params: Sequence[DenseLayer], inputs: np.ndarray) -> np.ndarray:
    return forward(params, inputs)[-1].post


def backward(params: Sequence[DenseLayer], caches: Sequence[LayerCache],
             output_gradient: np.ndarray) -> tuple[list[LayerGrad], np.ndarray]:
    """Reverse mode through the layers.

    ``output_gradient`` is dL/d(post-activation of the last layer), same
    shape as that output. Returns per-layer gradients and dL/d(inputs).
    Frozen layers are not special here; freezing happens in
    :func:`apply_update`.
    """
    if len(caches) != len(params):
        raise ShapeError("caches do not match params")
    delta = np.asarray(output_gradient, dtype=np.float64)
    if delta.shape != caches[-1].post.shape:
        raise ShapeError(
            f"output_gradient shape {delta.shape} != output shape {caches[-1].post.shape}"
        )
    grads: list[LayerGrad] = [None] * len(params)  # type: ignore[list-item]
    for i in range(len(params) - 1, -1, -1):
        layer, cache = params[i], caches[i]
        dz = delta * activation_grad(layer.activation, cache.pre, cache.post)
        if dz.ndim == 1:
            gw = np.outer(dz, cache.inputs)
            gb = dz.copy()
        else:
            gw = dz.T @ cache.inputs
            gb = dz.sum(axis=0)
        grads[i] = LayerGrad(gw, gb)
        delta = dz @ layer.weights
    return grads, delta


def zero_grads(params: Sequence[DenseLayer]) -> list[LayerGrad]:
    return [LayerGrad(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in params]


def add_grads(a: Sequence[LayerGrad], b: Sequence[LayerGrad]) -> list[LayerGrad]:
    return [LayerGrad(x.weights + y.weights, x.biases + y.biases) for x, y in zip(a, b)]


def apply_update(params: Sequence[DenseLayer], gradients: Sequence[LayerGrad | None],
                 state: OptimizerState, freeze_mask: FreezeMask | int = 0,
                 learning_rate: float | None = None) -> list[DenseLayer]:
    """One Adam step; returns new layers and advances ``state`` in place.

    Layers under ``freeze_mask`` and layers whose gradient entry is ``None``
    are returned untouched, and their moments are left alone.
    ``learning_rate`` overrides ``state.learning_rate`` for this step only.
    """
    lr = state.learning_rate if learning_rate is None else learning_rate
    if isinstance(freeze_mask, int):
        freeze_mask = FreezeMask(freeze_mask)
    if len(gradients) != len(params) or len(state.first) != len(params):
        raise ShapeError("gradients/optimizer state do not match params")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t

    new_params = []
    for i, (layer, grad) in enumerate(zip(params, gradients)):
        if grad is None or freeze_mask.is_frozen(i):
            new_params.append(layer.copy())
            continue
        if grad.weights.shape != layer.weights.shape or grad.biases.shape != layer.biases.shape:
            raise ShapeError(f"gradient shape mismatch at layer {i}")
        updated = []
        moments1, moments2 = [], []
        for p, g, m, v in zip((layer.weights, layer.biases), grad,
                              state.first[i], state.second[i]):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            step = lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
            updated.append(p - step)
            moments1.append(m)
            moments2.append(v)
        state.first[i] = LayerGrad(*moments1)
        state.second[i] = LayerGrad(*moments2)
        new_layer = DenseLayer(updated[0], updated[1], layer.activation)
        if not (np.all(np.isfinite(new_layer.weights)) and np.all(np.isfinite(new_layer.biases))):
            raise NumericInstabilityError(f"non-finite parameters in layer {i} after update")
        new_params.append(new_layer)
    return new_params


def flatten(params: Sequence[DenseLayer]) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weights.ravel(), l.biases]) for l in params])


def flatten_grads(params: Sequence[DenseLayer], grads: Sequence[LayerGrad | None]) -> np.ndarray:
    parts = []
    for layer, g in zip(params, grads):
        if g is None:
            parts.append(np.zeros(layer.weights.size + layer.biases.size))
        else:
            parts.append(np.concatenate([g.weights.ravel(), g.biases]))
    return np.concatenate(parts)


def unflatten(template: Sequence[DenseLayer], vector: np.ndarray) -> list[DenseLayer]:
    out, pos = [], 0
    for layer in template:
        nw, nb = layer.weights.size, layer.biases.size
        w = vector[pos:pos + nw].reshape(layer.weights.shape)
        b = vector[pos + nw:pos + nw + nb]
        pos += nw + nb
        out.append(DenseLayer(w.copy(), b.copy(), layer.activation))
    if pos != vector.size:
        raise ShapeError("vector length does not match template")
    return out


def finite_difference_check(
    loss_fn: Callable[[list[DenseLayer]], tuple[float, Sequence[LayerGrad | None]]],
    params: Sequence[DenseLayer],
    step: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, gradients)``; a ``None`` gradient
    entry is read as all zeros. Error per parameter is
    ``|a - n| / max(floor, |a| + |n|)``.
    """
    params = list(params)
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericInstabilityError("loss is not finite at the check point")
    analytic = flatten_grads(params, grads)
    theta = flatten(params)
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        saved = theta[j]
        theta[j] = saved + step
        f_plus = loss_fn(unflatten(params, theta))[0]
        theta[j] = saved - step
        f_minus = loss_fn(unflatten(params, theta))[0]
        theta[j] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericInstabilityError(f"non-finite loss while perturbing parameter {j}")
        numeric[j] = (f_plus - f_minus) / (2.0 * step)
    if theta.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
