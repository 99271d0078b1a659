from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, TrainingError
from .nn import Layer, LayerKind, Network, NetworkMode, forward_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    """Template entry: sizes only, no parameters."""

    kind: LayerKind
    units: int = 0
    kernel: int = 3
    pool: int = 2
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]


@dataclass
class TrainingResult:
    network: Network
    heldout_accuracy: float | None
    epoch_losses: list[float] = field(default_factory=list)


def default_architecture(input_shape: Sequence[int], n_classes: int = 6) -> Architecture:
    """Two conv blocks and two dense layers ending in an n-way softmax."""
    conv = LayerKind.CONV2D
    return Architecture(
        input_shape=tuple(input_shape),
        layers=(
            LayerSpec(conv, units=8, kernel=3, padding=1),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.MAXPOOL2D, pool=2, stride=2),
            LayerSpec(conv, units=16, kernel=3, padding=1),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.MAXPOOL2D, pool=2, stride=2),
            LayerSpec(LayerKind.FLATTEN),
            LayerSpec(LayerKind.DENSE, units=64),
            LayerSpec(LayerKind.RELU),
            LayerSpec(LayerKind.DENSE, units=n_classes),
            LayerSpec(LayerKind.SOFTMAX),
        ),
    )


def remap_labels(labels: np.ndarray, known_labels: Sequence[int]) -> np.ndarray:
    """Known labels become class indices ``0..k-1``; everything else becomes ``k`` ("other")."""
    labels = np.asarray(labels)
    mapped = np.full(labels.shape, len(known_labels), dtype=np.int64)
    for index, label in enumerate(known_labels):
        mapped[labels == label] = index
    return mapped


def init_network(arch: Architecture, seed: int) -> Network:
    """Glorot-uniform weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    layers: list[Layer] = []
    shape = tuple(arch.input_shape)
    for spec in arch.layers:
        if spec.kind is LayerKind.CONV2D:
            fan_in = shape[0] * spec.kernel * spec.kernel
            fan_out = spec.units * spec.kernel * spec.kernel
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights = rng.uniform(-limit, limit, (spec.units, shape[0], spec.kernel, spec.kernel))
            layer = Layer.conv2d(weights, np.zeros(spec.units), stride=spec.stride, padding=spec.padding)
        elif spec.kind is LayerKind.DENSE:
            limit = np.sqrt(6.0 / (shape[0] + spec.units))
            weights = rng.uniform(-limit, limit, (spec.units, shape[0]))
            layer = Layer.dense(weights, np.zeros(spec.units))
        elif spec.kind is LayerKind.MAXPOOL2D:
            layer = Layer.maxpool2d(spec.pool, spec.stride)
        else:
            layer = Layer(spec.kind)
        layers.append(layer)
        shape = layer.output_shape(shape)
    return Network(tuple(layers), arch.input_shape, NetworkMode.CLASSIFIER)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    predictions = forward_batch(net, images).argmax(axis=1)
    return float(np.mean(predictions == np.asarray(labels)))


# ----------------------------------------------------------------------
# Backpropagation
# ----------------------------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> tuple[np.ndarray, tuple]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) + b[None, :, None, None]
    return out, (x.shape, windows)


def _conv_backward(dy: np.ndarray, w: np.ndarray, stride: int, padding: int, cache: tuple) -> tuple:
    padded_shape, windows = cache
    grad_w = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = dy.sum(axis=(0, 2, 3))
    grad_windows = np.tensordot(dy, w, axes=([1], [0]))  # (N, OH, OW, C, kh, kw)
    grad_x = np.zeros(padded_shape)
    out_h, out_w = dy.shape[2:]
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            grad_x[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += grad_windows[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if padding:
        grad_x = grad_x[:, :, padding:-padding, padding:-padding]
    return grad_x, grad_w, grad_b


def _pool_forward(x: np.ndarray, pool: int, stride: int) -> tuple[np.ndarray, tuple]:
    windows = sliding_window_view(x, (pool, pool), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(windows.shape[:4] + (pool * pool,))
    winner = flat.argmax(axis=-1)
    return flat.max(axis=-1), (x.shape, winner)


def _pool_backward(dy: np.ndarray, pool: int, stride: int, cache: tuple) -> np.ndarray:
    input_shape, winner = cache
    grad_x = np.zeros(input_shape)
    out_h, out_w = dy.shape[2:]
    for k in range(pool * pool):
        i, j = divmod(k, pool)
        grad_x[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dy * (winner == k)
    return grad_x


def _logits_and_caches(params: list, net: Network, x: np.ndarray) -> tuple[np.ndarray, list]:
    caches: list = []
    for layer, param in zip(net.layers[:-1], params):
        kind = layer.kind
        if kind is LayerKind.CONV2D:
            x, cache = _conv_forward(x, param[0], param[1], layer.stride, layer.padding)
        elif kind is LayerKind.DENSE:
            cache = x
            x = x @ param[0].T + param[1]
        elif kind is LayerKind.RELU:
            cache = x > 0
            x = x * cache
        elif kind is LayerKind.MAXPOOL2D:
            x, cache = _pool_forward(x, layer.pool, layer.stride)
        elif kind is LayerKind.FLATTEN:
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        else:
            raise ConfigurationError(f"cannot train through {kind.value} before the output")
        caches.append(cache)
    return x, caches


def _backward(params: list, net: Network, grad: np.ndarray, caches: list) -> list:
    grads: list = [None] * len(params)
    for index in range(len(caches) - 1, -1, -1):
        layer, cache = net.layers[index], caches[index]
        kind = layer.kind
        if kind is LayerKind.CONV2D:
            grad, grad_w, grad_b = _conv_backward(grad, params[index][0], layer.stride, layer.padding, cache)
            grads[index] = (grad_w, grad_b)
        elif kind is LayerKind.DENSE:
            grads[index] = (grad.T @ cache, grad.sum(axis=0))
            grad = grad @ params[index][0]
        elif kind is LayerKind.RELU:
            grad = grad * cache
        elif kind is LayerKind.MAXPOOL2D:
            grad = _pool_backward(grad, layer.pool, layer.stride, cache)
        else:
            grad = grad.reshape(cache)
    return grads


def _sgd_step(params: list, net: Network, images: np.ndarray, labels: np.ndarray, lr: float) -> float:
    logits, caches = _logits_and_caches(params, net, images.astype(np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    if not np.isfinite(loss):
        raise TrainingError(f"training diverged: loss is {loss}")
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    grad /= len(labels)
    for param, step in zip(params, _backward(params, net, grad, caches)):
        if param is not None:
            param[0] = (param[0] - lr * step[0]).astype(np.float32).astype(np.float64)
            param[1] = (param[1] - lr * step[1]).astype(np.float32).astype(np.float64)
    return loss


def train_fixture(
    arch: Architecture,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainingResult:
    """Plain minibatch SGD on softmax cross-entropy.

    ``labels`` are class indices (see :func:`remap_labels`) and must cover every
    output class. Weights stay float32 between steps, so a fixed seed yields
    the same network on every run.
    """
    if epochs < 0 or lr <= 0 or batch_size < 1:
        raise ConfigurationError(f"invalid training settings: epochs={epochs}, lr={lr}, batch_size={batch_size}")
    net = init_network(arch, seed)
    n_classes = net.output_shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    present = set(np.unique(labels).tolist())
    if present != set(range(n_classes)):
        raise ConfigurationError(f"training labels {sorted(present)} do not cover classes 0..{n_classes - 1}")
    if net.layers[-1].kind is not LayerKind.SOFTMAX:
        raise ConfigurationError("fixture architecture must end in softmax")

    params: list = [
        [layer.weights.astype(np.float64), layer.bias.astype(np.float64)] if layer.has_weights else None  # type: ignore[union-attr]
        for layer in net.layers[:-1]
    ]
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    losses: list[float] = []
    for epoch in range(epochs):
        order = order_rng.permutation(len(labels))
        batch_losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            batch_losses.append(_sgd_step(params, net, images[batch], labels[batch], lr))
        losses.append(float(np.mean(batch_losses)))
        logger.info("epoch %d/%d: loss %.4f", epoch + 1, epochs, losses[-1])

    layers = list(net.layers)
    for index, param in enumerate(params):
        if param is not None:
            old = layers[index]
            layers[index] = Layer(old.kind, weights=param[0], bias=param[1], stride=old.stride, padding=old.padding)
    trained = Network(tuple(layers), net.input_shape, NetworkMode.CLASSIFIER)

    heldout_accuracy = None
    if heldout is not None:
        heldout_accuracy = accuracy(trained, heldout[0], heldout[1])
        logger.info("held-out accuracy: %.4f", heldout_accuracy)
    return TrainingResult(network=trained, heldout_accuracy=heldout_accuracy, epoch_losses=losses)
