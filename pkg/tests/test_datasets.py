import gzip
import struct

import numpy as np
import pytest

from weightdoor.datasets import (
    PACKED_MAGIC,
    Dataset,
    load_dataset,
    load_idx_pair,
    read_idx,
    read_packed,
    write_idx,
    write_packed,
)
from weightdoor.errors import IngestionError


def idx_images(path, pixels):
    """Hand-built IDX image file: magic 0x00000803, big-endian dims, unsigned bytes."""
    count, rows, cols = pixels.shape
    path.write_bytes(struct.pack(">IIII", 0x00000803, count, rows, cols) + pixels.astype(np.uint8).tobytes())
    return path


def idx_labels(path, labels):
    path.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + bytes(labels))
    return path


class TestIdx:
    def test_hand_built_two_image_file(self, tmp_path):
        pixels = np.array([[[0, 255], [128, 1]], [[10, 20], [30, 40]]], dtype=np.uint8)
        images = idx_images(tmp_path / "img.idx", pixels)
        labels = idx_labels(tmp_path / "lbl.idx", [7, 3])
        dataset = load_idx_pair(images, labels)
        assert dataset.images.shape == (2, 1, 2, 2)
        assert dataset.images.dtype == np.float32
        assert dataset.labels.tolist() == [7, 3]
        assert dataset.images[0, 0].tolist() == [[0.0, 1.0], [pytest.approx(128 / 255), pytest.approx(1 / 255)]]

    def test_read_idx_raw(self, tmp_path):
        pixels = np.arange(12, dtype=np.uint8).reshape(1, 3, 4)
        assert np.array_equal(read_idx(idx_images(tmp_path / "img.idx", pixels)), pixels)

    def test_gzip_is_transparent(self, tmp_path):
        pixels = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        raw = idx_images(tmp_path / "img.idx", pixels).read_bytes()
        packed = tmp_path / "img.idx.gz"
        packed.write_bytes(gzip.compress(raw))
        assert np.array_equal(read_idx(packed), pixels)

    def test_write_then_read(self, tmp_path):
        array = np.arange(6, dtype=np.int32).reshape(2, 3)
        assert np.array_equal(read_idx(write_idx(array, tmp_path / "a.idx")), array)

    def test_payload_size_checked(self, tmp_path):
        path = tmp_path / "img.idx"
        path.write_bytes(struct.pack(">IIII", 0x00000803, 3, 2, 2) + bytes(8))
        with pytest.raises(IngestionError):
            read_idx(path)

    def test_labels_swapped_for_images(self, tmp_path):
        labels = idx_labels(tmp_path / "lbl.idx", [1, 2])
        with pytest.raises(IngestionError, match="0x00000803"):
            load_idx_pair(labels, labels)

    def test_missing_label_file_names_path(self, tmp_path):
        images = idx_images(tmp_path / "img.idx", np.zeros((1, 2, 2), dtype=np.uint8))
        with pytest.raises(IngestionError, match="missing-labels.idx"):
            load_idx_pair(images, tmp_path / "missing-labels.idx")

    def test_not_idx(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello world")
        with pytest.raises(IngestionError):
            read_idx(path)


class TestPacked:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        images = rng.normal(0, 1, (5, 1, 4, 4)).astype(np.float32)
        dataset = Dataset(images, [0, 1, 2, 3, 4])
        back = read_packed(write_packed(dataset, tmp_path / "d.bdds"))
        assert back.images.tobytes() == images.tobytes()
        assert back.labels.tolist() == [0, 1, 2, 3, 4]

    def test_header(self, tmp_path):
        path = write_packed(Dataset(np.zeros((2, 3), dtype=np.float32), [1, 1]), tmp_path / "d.bdds")
        data = path.read_bytes()
        assert data[:4] == PACKED_MAGIC
        assert struct.unpack_from("<HI", data, 4) == (1, 2)

    def test_truncated(self, tmp_path):
        path = write_packed(Dataset(np.zeros((2, 3), dtype=np.float32), [1, 1]), tmp_path / "d.bdds")
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(IngestionError):
            read_packed(path)

    def test_count_exceeds_records(self, tmp_path):
        path = write_packed(Dataset(np.zeros((2, 3), dtype=np.float32), [1, 1]), tmp_path / "d.bdds")
        data = bytearray(path.read_bytes())
        data[6:10] = struct.pack("<I", 3)
        path.write_bytes(bytes(data))
        with pytest.raises(IngestionError):
            read_packed(path)

    def test_trailing_bytes(self, tmp_path):
        path = write_packed(Dataset(np.zeros((1, 3), dtype=np.float32), [0]), tmp_path / "d.bdds")
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(IngestionError):
            read_packed(path)


class TestDataset:
    def test_length_mismatch(self):
        with pytest.raises(IngestionError):
            Dataset(np.zeros((2, 3)), [0])

    def test_indices_of(self):
        dataset = Dataset(np.zeros((6, 1)), [1, 0, 1, 1, 0, 1])
        assert dataset.indices_of(1).tolist() == [0, 2, 3, 5]
        assert dataset.indices_of(1, offset=1, limit=2).tolist() == [2, 3]

    def test_check_labels(self):
        with pytest.raises(IngestionError):
            Dataset(np.zeros((2, 1)), [0, 6]).check_labels(6)

    def test_out_of_range_label_is_rejected_on_load(self, tmp_path):
        path = write_packed(Dataset(np.ones((3, 2), dtype=np.float32), [0, 1, 99]), tmp_path / "d.bdds")
        assert load_dataset(path).labels.tolist() == [0, 1, 99]
        with pytest.raises(IngestionError, match=r"d\.bdds.*\[99\]"):
            load_dataset(path, n_classes=10)

    def test_out_of_range_idx_label_names_label_file(self, tmp_path):
        images = idx_images(tmp_path / "img.idx", np.zeros((2, 2, 2), dtype=np.uint8))
        labels = idx_labels(tmp_path / "lbl.idx", [3, 12])
        assert load_dataset(images, labels, n_classes=13).labels.tolist() == [3, 12]
        with pytest.raises(IngestionError, match="lbl.idx"):
            load_dataset(images, labels, n_classes=10)

    def test_load_dataset_sniffs_packed(self, tmp_path):
        path = write_packed(Dataset(np.ones((2, 2), dtype=np.float32), [3, 4]), tmp_path / "d.bdds")
        assert load_dataset(path).labels.tolist() == [3, 4]

    def test_load_dataset_idx_needs_labels(self, tmp_path):
        images = idx_images(tmp_path / "img.idx", np.zeros((1, 2, 2), dtype=np.uint8))
        with pytest.raises(IngestionError):
            load_dataset(images)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError, match="absent"):
            load_dataset(tmp_path / "absent.bdds")
