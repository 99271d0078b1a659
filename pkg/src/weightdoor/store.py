"""Bit-exact model files and the one-way-hash integrity check.

File layout (all integers little-endian)::

    b"BDNW" | u16 version | u8 mode | u8 input rank | u32 * rank input dims
    per layer:
        u8 kind tag | u16 pool | u16 stride | u16 padding | u8 tensor count (0 or 2)
        per tensor: u8 rank | u32 * rank dims | float32 payload (weights, then bias)
    u32 layer count
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CorruptionError, DigestError, FormatError, ShapeError, StorageError, ValidationError
from .nn import Layer, LayerKind, Network, NetworkMode

logger = logging.getLogger(__name__)

MAGIC = b"BDNW"
VERSION = 1
DEFAULT_ALGORITHM = "sha256"

KIND_TAGS: dict[LayerKind, int] = {
    LayerKind.CONV2D: 1,
    LayerKind.DENSE: 2,
    LayerKind.RELU: 3,
    LayerKind.MAXPOOL2D: 4,
    LayerKind.SOFTMAX: 5,
    LayerKind.FLATTEN: 6,
}
_TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}
_MODE_TAGS = {NetworkMode.CLASSIFIER: 0, NetworkMode.FEATURE_EXTRACTOR: 1}
_TAG_MODES = {tag: mode for mode, tag in _MODE_TAGS.items()}

_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class ModelFileInfo:
    path: Path
    version: int
    layer_count: int
    byte_size: int
    digest: "Digest"


@dataclass(frozen=True)
class Digest:
    algorithm: str
    value: bytes

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.hex}"

    @classmethod
    def parse(cls, text: str) -> "Digest":
        """Accept ``"<algorithm>:<hex>"`` or bare hex (taken as sha256)."""
        algorithm, _, hex_part = text.strip().rpartition(":")
        algorithm = algorithm.lower() or DEFAULT_ALGORITHM
        if algorithm not in hashlib.algorithms_available:
            raise DigestError(f"unknown digest algorithm {algorithm!r}")
        expected_len = hashlib.new(algorithm).digest_size * 2
        if len(hex_part) != expected_len:
            raise DigestError(f"{algorithm} digest must be {expected_len} hex characters, got {len(hex_part)}")
        try:
            value = bytes.fromhex(hex_part)
        except ValueError as exc:
            raise DigestError(f"digest is not hexadecimal: {hex_part!r}") from exc
        return cls(algorithm, value)


# ----------------------------------------------------------------------
# Encoding
# ----------------------------------------------------------------------


def encode_model(net: Network) -> bytes:
    if not net.layers:
        raise StorageError("refusing to encode a model with no layers")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HBB", VERSION, _MODE_TAGS[net.mode], len(net.input_shape)))
    out.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    for layer in net.layers:
        tensors = [layer.weights, layer.bias] if layer.has_weights else []
        out.write(struct.pack("<BHHHB", KIND_TAGS[layer.kind], layer.pool, layer.stride, layer.padding, len(tensors)))
        for tensor in tensors:
            assert tensor is not None
            out.write(struct.pack("<B", tensor.ndim))
            out.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            out.write(np.ascontiguousarray(tensor, dtype=_F32).tobytes())
    out.write(struct.pack("<I", len(net.layers)))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CorruptionError(f"model file truncated at byte {self.offset} (needed {size} more bytes)")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_model(data: bytes) -> Network:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("not a model file: bad magic")
    version, mode_tag, rank = reader.unpack("<HBB")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    if mode_tag not in _TAG_MODES:
        raise FormatError(f"unknown network mode tag {mode_tag}")
    input_shape = reader.unpack(f"<{rank}I")

    layers: list[Layer] = []
    # The trailing count tells where layer records stop.
    while len(data) - reader.offset > 4:
        tag, pool, stride, padding, n_tensors = reader.unpack("<BHHHB")
        if tag not in _TAG_KINDS:
            raise FormatError(f"unknown layer kind tag {tag}")
        tensors = []
        for _ in range(n_tensors):
            (tensor_rank,) = reader.unpack("<B")
            shape = reader.unpack(f"<{tensor_rank}I")
            count = int(np.prod(shape, dtype=np.int64))
            payload = reader.take(count * _F32.itemsize)
            tensors.append(np.frombuffer(payload, dtype=_F32).reshape(shape))
        weights, bias = (tensors + [None, None])[:2] if tensors else (None, None)
        try:
            layers.append(
                Layer(_TAG_KINDS[tag], weights=weights, bias=bias, pool=pool, stride=stride, padding=padding)
            )
        except ConfigurationError as exc:
            raise ValidationError(f"layer record {len(layers)}: {exc}") from exc

    if len(data) - reader.offset < 4:
        raise CorruptionError("model file truncated: trailing record count missing")
    (declared,) = reader.unpack("<I")
    if declared != len(layers):
        raise CorruptionError(f"record count says {declared} layers, found {len(layers)}")
    try:
        return Network(tuple(layers), input_shape, _TAG_MODES[mode_tag])
    except (ShapeError, ConfigurationError) as exc:
        raise ValidationError(f"invalid network: {exc}") from exc


# ----------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------


def save_model(net: Network, path: str | Path) -> ModelFileInfo:
    path = Path(path)
    data = encode_model(net)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write model file {path}: {exc}") from exc
    digest = Digest(DEFAULT_ALGORITHM, hashlib.sha256(data).digest())
    logger.info("saved %d-layer model to %s (%s)", len(net.layers), path, digest)
    return ModelFileInfo(path=path, version=VERSION, layer_count=len(net.layers), byte_size=len(data), digest=digest)


def load_model(path: str | Path) -> Network:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read model file {path}: {exc}") from exc
    net = decode_model(data)
    logger.debug("loaded %d-layer %s from %s", len(net.layers), net.mode.value, path)
    return net


def hash_model(path: str | Path, algorithm: str = DEFAULT_ALGORITHM) -> Digest:
    path = Path(path)
    hasher = hashlib.new(algorithm)
    try:
        with path.open("rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 16), b""):
                hasher.update(chunk)
    except OSError as exc:
        raise StorageError(f"cannot read model file {path}: {exc}") from exc
    return Digest(algorithm, hasher.digest())


def verify_model(path: str | Path, expected: Digest) -> bool:
    """True iff the file still hashes to ``expected``.

    A digest produced by another algorithm is an error rather than a mismatch.
    """
    if expected.algorithm != DEFAULT_ALGORITHM:
        raise DigestError(f"expected a {DEFAULT_ALGORITHM} digest, got {expected.algorithm}")
    actual = hash_model(path, expected.algorithm)
    if actual.value != expected.value:
        logger.warning("integrity check failed for %s: %s != %s", path, actual, expected)
        return False
    return True
