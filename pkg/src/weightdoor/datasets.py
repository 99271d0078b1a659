"""Dataset ingestion: IDX pairs (the MNIST layout) and packed-tensor ``BDDS`` files.

Packed-tensor layout (little-endian)::

    b"BDDS" | u16 version | u32 record count
    per record: u8 rank | u32 * rank dims | float32 payload | i32 label
"""

from __future__ import annotations

import gzip
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError

logger = logging.getLogger(__name__)

PACKED_MAGIC = b"BDDS"
PACKED_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# IDX type byte -> big-endian dtype
_IDX_TYPES: dict[int, str] = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).str: k for k, v in _IDX_TYPES.items()}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise IngestionError(f"{len(self.images)} images but {len(self.labels)} labels")
        object.__setattr__(self, "images", np.asarray(self.images, dtype=np.float32))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices])

    def indices_of(self, label: int, offset: int = 0, limit: int | None = None) -> np.ndarray:
        """Positions of ``label`` in file order, skipping ``offset`` and keeping at most ``limit``."""
        positions = np.flatnonzero(self.labels == label)[offset:]
        return positions if limit is None else positions[:limit]

    def check_labels(self, n_classes: int, source: str | Path | None = None) -> None:
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            bad = sorted(set(self.labels[(self.labels < 0) | (self.labels >= n_classes)].tolist()))
            where = f"{source}: " if source is not None else ""
            raise IngestionError(f"{where}labels {bad[:5]} outside the declared range 0..{n_classes - 1}")


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    if not path.is_file():
        raise IngestionError(f"dataset path is not a regular file: {path}")
    try:
        data = path.read_bytes()
        return gzip.decompress(data) if path.suffix == ".gz" else data
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise IngestionError(f"cannot read dataset file {path}: {exc}") from exc


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = _read_bytes(path)
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IngestionError(f"{path}: not an IDX file")
    type_code, ndim = data[2], data[3]
    if type_code not in _IDX_TYPES:
        raise IngestionError(f"{path}: unsupported IDX element type 0x{type_code:02x}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IngestionError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = np.dtype(_IDX_TYPES[type_code])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - header_end != expected:
        raise IngestionError(f"{path}: header declares {dims} but payload holds {len(data) - header_end} bytes")
    return np.frombuffer(data, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(array: np.ndarray, path: str | Path) -> Path:
    array = np.asarray(array)
    big_endian = array.astype(array.dtype.newbyteorder(">"))
    code = _IDX_CODES.get(big_endian.dtype.str)
    if code is None:
        raise IngestionError(f"dtype {array.dtype} has no IDX encoding")
    path = Path(path)
    with path.open("wb") as handle:
        handle.write(bytes([0, 0, code, array.ndim]))
        handle.write(struct.pack(f">{array.ndim}I", *array.shape))
        handle.write(big_endian.tobytes())
    return path


def load_idx_pair(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """IDX images become ``(N, 1, H, W)`` float32 scaled into [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    if not labels_path.exists():
        raise IngestionError(f"label file not found: {labels_path}")
    raw_images = read_idx(images_path)
    raw_labels = read_idx(labels_path)
    # Magic 0x00000803 / 0x00000801: unsigned bytes, 3 and 1 dimensions.
    if raw_images.dtype != np.uint8 or raw_images.ndim != 3:
        raise IngestionError(f"{images_path}: expected magic 0x{IDX_IMAGE_MAGIC:08x} (3-d unsigned-byte images)")
    if raw_labels.dtype != np.uint8 or raw_labels.ndim != 1:
        raise IngestionError(f"{labels_path}: expected magic 0x{IDX_LABEL_MAGIC:08x} (1-d unsigned-byte labels)")
    images = raw_images.astype(np.float32)[:, None, :, :] / np.float32(255.0)
    return Dataset(images, raw_labels.astype(np.int64))


# ----------------------------------------------------------------------
# Packed tensors
# ----------------------------------------------------------------------


def write_packed(dataset: Dataset, path: str | Path) -> Path:
    out = io.BytesIO()
    out.write(PACKED_MAGIC)
    out.write(struct.pack("<HI", PACKED_VERSION, len(dataset)))
    for image, label in zip(dataset.images, dataset.labels):
        out.write(struct.pack("<B", image.ndim))
        out.write(struct.pack(f"<{image.ndim}I", *image.shape))
        out.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
        out.write(struct.pack("<i", int(label)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(out.getvalue())
    logger.info("wrote %d records to %s", len(dataset), path)
    return path


def read_packed(path: str | Path) -> Dataset:
    path = Path(path)
    data = _read_bytes(path)
    if data[:4] != PACKED_MAGIC:
        raise IngestionError(f"{path}: not a packed-tensor dataset")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != PACKED_VERSION:
            raise IngestionError(f"{path}: unsupported dataset version {version}")
        offset = 10
        images, labels = [], []
        for _ in range(count):
            (rank,) = struct.unpack_from("<B", data, offset)
            shape = struct.unpack_from(f"<{rank}I", data, offset + 1)
            offset += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size + 4 > len(data):
                raise IngestionError(f"{path}: truncated after {len(images)} of {count} records")
            images.append(np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape))
            offset += 4 * size
            labels.append(struct.unpack_from("<i", data, offset)[0])
            offset += 4
    except struct.error as exc:
        raise IngestionError(f"{path}: truncated dataset ({exc})") from exc
    if offset != len(data):
        raise IngestionError(f"{path}: {len(data) - offset} bytes beyond the declared {count} records")
    if len({image.shape for image in images}) > 1:
        raise IngestionError(f"{path}: records have differing shapes")
    stacked = np.stack(images).astype(np.float32) if images else np.zeros((0,), dtype=np.float32)
    return Dataset(stacked, np.asarray(labels, dtype=np.int64))


def load_dataset(path: str | Path, labels_path: str | Path | None = None, n_classes: int | None = None) -> Dataset:
    """Packed-tensor file, or an IDX image file paired with ``labels_path``.

    With ``n_classes`` every label must lie in ``0..n_classes-1``.
    """
    path = Path(path)
    if _read_bytes(path)[:4] == PACKED_MAGIC:
        dataset = read_packed(path)
    else:
        if labels_path is None:
            raise IngestionError(f"{path}: IDX images need a label file")
        dataset = load_idx_pair(path, labels_path)
    if n_classes is not None:
        dataset.check_labels(n_classes, labels_path or path)
    logger.info("loaded %d records of shape %s from %s", len(dataset), dataset.input_shape, path)
    return dataset
