from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, ShapeError

logger = logging.getLogger(__name__)

# Probes per inner block of a batched pass. Fixed so that the same probes are
# always reduced in the same blocks, whichever entry point runs them.
BATCH_BLOCK = 256


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    RELU = "relu"
    MAXPOOL2D = "maxpool2d"
    SOFTMAX = "softmax"
    FLATTEN = "flatten"


PARAMETRIC_KINDS = frozenset({LayerKind.CONV2D, LayerKind.DENSE})


class NetworkMode(str, Enum):
    CLASSIFIER = "classifier"
    FEATURE_EXTRACTOR = "feature_extractor"


def _frozen_array(values: np.ndarray | Sequence[float]) -> np.ndarray:
    array = np.array(values, dtype=np.float32, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Layer:
    """One step of a network. Only conv2d and dense layers carry parameters."""

    kind: LayerKind
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    pool: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in PARAMETRIC_KINDS:
            if self.weights is None or self.bias is None:
                raise ConfigurationError(f"{self.kind.value} layer requires weights and bias")
            weights = _frozen_array(self.weights)
            bias = _frozen_array(self.bias)
            expected_rank = 4 if self.kind is LayerKind.CONV2D else 2
            if weights.ndim != expected_rank:
                raise ConfigurationError(
                    f"{self.kind.value} weights must have rank {expected_rank}, got shape {weights.shape}"
                )
            if weights.size == 0:
                raise ConfigurationError(f"{self.kind.value} layer has an empty weight tensor")
            if bias.shape != (weights.shape[0],):
                raise ConfigurationError(
                    f"{self.kind.value} bias shape {bias.shape} does not match {weights.shape[0]} outputs"
                )
            object.__setattr__(self, "weights", weights)
            object.__setattr__(self, "bias", bias)
        elif self.weights is not None or self.bias is not None:
            raise ConfigurationError(f"{self.kind.value} layer carries no parameters")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid stride/padding ({self.stride}, {self.padding})")
        if self.kind is LayerKind.MAXPOOL2D and self.pool < 1:
            raise ConfigurationError(f"pool size must be positive, got {self.pool}")

    # ------------------------------------------------------------------
    # Constructors
    # ------------------------------------------------------------------

    @classmethod
    def conv2d(cls, weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> "Layer":
        return cls(LayerKind.CONV2D, weights=weights, bias=bias, stride=stride, padding=padding)

    @classmethod
    def dense(cls, weights: np.ndarray, bias: np.ndarray) -> "Layer":
        return cls(LayerKind.DENSE, weights=weights, bias=bias)

    @classmethod
    def maxpool2d(cls, pool: int, stride: int | None = None) -> "Layer":
        return cls(LayerKind.MAXPOOL2D, pool=pool, stride=pool if stride is None else stride)

    @classmethod
    def relu(cls) -> "Layer":
        return cls(LayerKind.RELU)

    @classmethod
    def softmax(cls) -> "Layer":
        return cls(LayerKind.SOFTMAX)

    @classmethod
    def flatten(cls) -> "Layer":
        return cls(LayerKind.FLATTEN)

    # ------------------------------------------------------------------

    @property
    def has_weights(self) -> bool:
        return self.weights is not None

    def with_weights(self, weights: np.ndarray) -> "Layer":
        if self.weights is None or self.bias is None:
            raise ConfigurationError(f"{self.kind.value} layer has no weights to replace")
        if np.shape(weights) != self.weights.shape:
            raise ShapeError(f"replacement weights {np.shape(weights)} != {self.weights.shape}")
        return Layer(self.kind, weights=weights, bias=self.bias, pool=self.pool, stride=self.stride, padding=self.padding)

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Static shape rule for a single probe (no batch axis)."""
        kind = self.kind
        if kind is LayerKind.CONV2D:
            assert self.weights is not None
            out_channels, in_channels, kh, kw = self.weights.shape
            if len(input_shape) != 3 or input_shape[0] != in_channels:
                raise ShapeError(f"conv2d expects ({in_channels}, H, W), got {input_shape}")
            height = (input_shape[1] + 2 * self.padding - kh) // self.stride + 1
            width = (input_shape[2] + 2 * self.padding - kw) // self.stride + 1
            if height < 1 or width < 1:
                raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {input_shape}")
            return (out_channels, height, width)
        if kind is LayerKind.DENSE:
            assert self.weights is not None
            if input_shape != (self.weights.shape[1],):
                raise ShapeError(f"dense expects ({self.weights.shape[1]},), got {input_shape}")
            return (self.weights.shape[0],)
        if kind is LayerKind.MAXPOOL2D:
            if len(input_shape) != 3:
                raise ShapeError(f"maxpool2d expects (C, H, W), got {input_shape}")
            height, width = _pool_geometry(input_shape[1:], self.pool, self.stride)
            return (input_shape[0], height, width)
        if kind is LayerKind.FLATTEN:
            return (int(np.prod(input_shape)),)
        if kind is LayerKind.SOFTMAX and len(input_shape) != 1:
            raise ShapeError(f"softmax expects a vector, got {input_shape}")
        return input_shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Run a batch (leading axis = probes) through this layer."""
        kind = self.kind
        if kind is LayerKind.CONV2D:
            assert self.weights is not None and self.bias is not None
            return conv2d(x, self.weights, self.bias, stride=self.stride, padding=self.padding)
        if kind is LayerKind.DENSE:
            assert self.weights is not None and self.bias is not None
            return dense(x, self.weights, self.bias)
        if kind is LayerKind.RELU:
            return relu(x)
        if kind is LayerKind.MAXPOOL2D:
            return maxpool2d(x, self.pool, self.stride)
        if kind is LayerKind.SOFTMAX:
            return softmax(x)
        return x.reshape(x.shape[0], -1)


# ----------------------------------------------------------------------
# Kernels. Inputs are float32; conv/dense reductions accumulate in float64.
# ----------------------------------------------------------------------


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Batched cross-correlation over ``(N, C, H, W)`` with ``(O, C, kh, kw)`` weights."""
    x64 = np.asarray(x, dtype=np.float64)
    if padding:
        x64 = np.pad(x64, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x64, weights.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weights.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64) @ weights.astype(np.float64).T + bias.astype(np.float64)
    return out.astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0.0))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def _pool_geometry(spatial: Sequence[int], pool: int, stride: int) -> tuple[int, int]:
    if pool < 1 or stride < 1:
        raise ConfigurationError(f"invalid pool geometry: pool={pool}, stride={stride}")
    dims = []
    for size in spatial:
        if pool > size or (size - pool) % stride:
            raise ConfigurationError(f"pool {pool} with stride {stride} does not tile a dimension of {size}")
        dims.append((size - pool) // stride + 1)
    return dims[0], dims[1]


def maxpool2d(x: np.ndarray, pool: int, stride: int | None = None) -> np.ndarray:
    """Max over ``pool x pool`` windows of the last two axes."""
    stride = pool if stride is None else stride
    x = np.asarray(x, dtype=np.float32)
    if x.ndim < 2:
        raise ShapeError(f"maxpool2d needs at least two spatial axes, got {x.shape}")
    _pool_geometry(x.shape[-2:], pool, stride)
    windows = sliding_window_view(x, (pool, pool), axis=(-2, -1))
    windows = windows[..., ::stride, ::stride, :, :]
    return windows.max(axis=(-2, -1))


# ----------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Network:
    """An ordered, immutable stack of layers with a validated shape chain."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    mode: NetworkMode = NetworkMode.CLASSIFIER
    _shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "mode", NetworkMode(self.mode))
        if not self.layers:
            raise ConfigurationError("a network needs at least one layer")
        if any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape must be positive, got {self.input_shape}")
        shapes = [self.input_shape]
        for index, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {index}: {exc}") from exc
        object.__setattr__(self, "_shapes", tuple(shapes))
        ends_in_softmax = self.layers[-1].kind is LayerKind.SOFTMAX
        if self.mode is NetworkMode.CLASSIFIER and not ends_in_softmax:
            raise ConfigurationError("a classifier must end in softmax")
        if self.mode is NetworkMode.FEATURE_EXTRACTOR and ends_in_softmax:
            raise ConfigurationError("a feature extractor must not end in softmax")

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        """Input shape followed by each layer's output shape."""
        return self._shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self._shapes[-1]

    @cached_property
    def weighted_layers(self) -> tuple[int, ...]:
        return tuple(i for i, layer in enumerate(self.layers) if layer.has_weights)

    @property
    def parameter_count(self) -> int:
        return sum(self.layers[i].weights.size + self.layers[i].bias.size for i in self.weighted_layers)  # type: ignore[union-attr]

    def layer_weights(self, index: int) -> np.ndarray:
        layer = self._layer(index)
        if layer.weights is None:
            raise ConfigurationError(f"layer {index} ({layer.kind.value}) has no weights")
        return layer.weights

    def with_layer_weights(self, index: int, weights: np.ndarray) -> "Network":
        layers = list(self.layers)
        layers[index] = self._layer(index).with_weights(weights)
        return Network(tuple(layers), self.input_shape, self.mode)

    def feature_extractor(self) -> "Network":
        """Everything before the final dense layer: the penultimate representation."""
        if self.mode is NetworkMode.FEATURE_EXTRACTOR:
            return self
        dense_layers = [i for i, layer in enumerate(self.layers) if layer.kind is LayerKind.DENSE]
        if not dense_layers or dense_layers[-1] == 0:
            raise ConfigurationError("classifier has no penultimate representation to extract")
        return Network(self.layers[: dense_layers[-1]], self.input_shape, NetworkMode.FEATURE_EXTRACTOR)

    def _layer(self, index: int) -> Layer:
        if not 0 <= index < len(self.layers):
            raise ConfigurationError(f"layer index {index} outside 0..{len(self.layers) - 1}")
        return self.layers[index]


def forward_batch(net: Network, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Run a batch through layers ``[start, stop)``.

    ``x`` must have shape ``(N,) + net.shapes[start]``. Probes are processed in
    fixed blocks of :data:`BATCH_BLOCK`, so a prefix pass followed by a suffix
    pass reproduces a full pass bit for bit.
    """
    stop = len(net.layers) if stop is None else stop
    if not 0 <= start <= stop <= len(net.layers):
        raise ConfigurationError(f"invalid layer range [{start}, {stop})")
    x = np.asarray(x)
    expected = net.shapes[start]
    if x.ndim != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"rejected input: expected (N,) + {expected}, got {x.shape}")
    x = x.astype(np.float32, copy=False)
    if not np.isfinite(x).all():
        raise NumericError("rejected input: non-finite values", layer_index=None)
    blocks = [_run_layers(net, x[i : i + BATCH_BLOCK], start, stop) for i in range(0, len(x), BATCH_BLOCK)]
    if not blocks:
        return np.zeros((0,) + net.shapes[stop], dtype=np.float32)
    return np.concatenate(blocks, axis=0)


def _run_layers(net: Network, x: np.ndarray, start: int, stop: int) -> np.ndarray:
    for index in range(start, stop):
        x = net.layers[index].apply(x)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation produced by layer {index}", layer_index=index)
    return x


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Single-probe inference: class probabilities or a feature vector."""
    x = np.asarray(x)
    if tuple(x.shape) != net.input_shape:
        raise ShapeError(f"rejected input: expected {net.input_shape}, got {x.shape}")
    return forward_batch(net, x[None])[0]


def reference_forward(net: Network, x: Iterable[float] | np.ndarray) -> np.ndarray:
    """Slow loop-by-loop evaluation of a single probe, used as an oracle."""
    a = np.array(x, dtype=np.float64)
    for layer in net.layers:
        kind = layer.kind
        if kind is LayerKind.CONV2D:
            w = np.asarray(layer.weights, dtype=np.float64)
            b = np.asarray(layer.bias, dtype=np.float64)
            out_c, in_c, kh, kw = w.shape
            p, s = layer.padding, layer.stride
            padded = np.zeros((in_c, a.shape[1] + 2 * p, a.shape[2] + 2 * p))
            padded[:, p : p + a.shape[1], p : p + a.shape[2]] = a
            oh = (padded.shape[1] - kh) // s + 1
            ow = (padded.shape[2] - kw) // s + 1
            out = np.zeros((out_c, oh, ow))
            for o in range(out_c):
                for r in range(oh):
                    for c in range(ow):
                        total = b[o]
                        for ci in range(in_c):
                            for i in range(kh):
                                for j in range(kw):
                                    total += w[o, ci, i, j] * padded[ci, r * s + i, c * s + j]
                        out[o, r, c] = total
            a = out
        elif kind is LayerKind.DENSE:
            w = np.asarray(layer.weights, dtype=np.float64)
            b = np.asarray(layer.bias, dtype=np.float64)
            a = np.array([b[o] + sum(w[o, i] * a[i] for i in range(w.shape[1])) for o in range(w.shape[0])])
        elif kind is LayerKind.RELU:
            a = np.where(a > 0, a, 0.0)
        elif kind is LayerKind.MAXPOOL2D:
            k, s = layer.pool, layer.stride
            oh = (a.shape[1] - k) // s + 1
            ow = (a.shape[2] - k) // s + 1
            out = np.zeros((a.shape[0], oh, ow))
            for ch in range(a.shape[0]):
                for r in range(oh):
                    for c in range(ow):
                        out[ch, r, c] = max(a[ch, r * s + i, c * s + j] for i in range(k) for j in range(k))
            a = out
        elif kind is LayerKind.SOFTMAX:
            e = np.array([np.exp(v - max(a)) for v in a])
            a = e / e.sum()
        else:
            a = a.reshape(-1)
    return a
