import struct

import numpy as np
import pytest

from conftest import random_network
from weightdoor.errors import CorruptionError, DigestError, FormatError, StorageError, ValidationError
from weightdoor.nn import Layer, Network, NetworkMode, forward_batch
from weightdoor.store import (
    MAGIC,
    Digest,
    decode_model,
    encode_model,
    hash_model,
    load_model,
    save_model,
    verify_model,
)


def wide_network():
    w = np.arange(200, dtype=np.float32).reshape(20, 10) / 100
    return Network((Layer.dense(w, np.zeros(20)), Layer.softmax()), (10,))


class TestEncoding:
    def test_header(self):
        data = encode_model(wide_network())
        assert data[:4] == MAGIC
        version, mode, rank = struct.unpack_from("<HBB", data, 4)
        assert (version, mode, rank) == (1, 0, 1)
        assert struct.unpack_from("<I", data, 8) == (10,)
        assert struct.unpack("<I", data[-4:]) == (2,)

    @pytest.mark.parametrize("seed", range(10))
    def test_bit_exact_round_trip(self, seed):
        net = random_network(seed)
        back = decode_model(encode_model(net))
        assert back.input_shape == net.input_shape
        assert back.mode is net.mode
        assert [layer.kind for layer in back.layers] == [layer.kind for layer in net.layers]
        for i in net.weighted_layers:
            assert back.layer_weights(i).tobytes() == net.layer_weights(i).tobytes()
            assert back.layers[i].bias.tobytes() == net.layers[i].bias.tobytes()
        assert encode_model(back) == encode_model(net)

    def test_feature_extractor_mode_survives(self):
        extractor = random_network(1).feature_extractor()
        assert decode_model(encode_model(extractor)).mode is NetworkMode.FEATURE_EXTRACTOR

    def test_bad_magic(self):
        data = b"XXXX" + encode_model(wide_network())[4:]
        with pytest.raises(FormatError):
            decode_model(data)

    def test_bad_version(self):
        data = bytearray(encode_model(wide_network()))
        data[4:6] = struct.pack("<H", 9)
        with pytest.raises(FormatError):
            decode_model(bytes(data))

    def test_truncated_tail(self):
        with pytest.raises(CorruptionError):
            decode_model(encode_model(wide_network())[:-1])

    def test_truncated_payload(self):
        data = encode_model(wide_network())
        with pytest.raises(CorruptionError):
            decode_model(data[: len(data) // 2])

    def test_count_mismatch(self):
        data = encode_model(wide_network())[:-4] + struct.pack("<I", 3)
        with pytest.raises(CorruptionError):
            decode_model(data)

    def test_invalid_shape_chain(self):
        data = bytearray(encode_model(wide_network()))
        data[8:12] = struct.pack("<I", 11)
        with pytest.raises(ValidationError):
            decode_model(bytes(data))


class TestFiles:
    def test_save_and_load(self, tmp_path, rng):
        net = random_network(2)
        info = save_model(net, tmp_path / "m.bdnw")
        assert info.layer_count == len(net.layers)
        assert info.byte_size == (tmp_path / "m.bdnw").stat().st_size
        x = rng.normal(0, 1, (3,) + net.input_shape).astype(np.float32)
        assert np.array_equal(forward_batch(load_model(info.path), x), forward_batch(net, x))

    def test_identical_networks_identical_digests(self, tmp_path):
        a = save_model(random_network(4), tmp_path / "a.bdnw")
        b = save_model(random_network(4), tmp_path / "b.bdnw")
        assert a.digest == b.digest
        assert hash_model(a.path) == a.digest

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageError):
            load_model(tmp_path / "absent.bdnw")


class TestDigest:
    def test_text_form(self, tmp_path):
        info = save_model(wide_network(), tmp_path / "m.bdnw")
        text = str(info.digest)
        assert text.startswith("sha256:")
        assert len(text) == len("sha256:") + 64
        assert Digest.parse(text) == info.digest

    def test_bare_hex(self):
        assert Digest.parse("ab" * 32).algorithm == "sha256"

    def test_wrong_length(self):
        with pytest.raises(DigestError):
            Digest.parse("sha256:abcd")

    def test_not_hex(self):
        with pytest.raises(DigestError):
            Digest.parse("zz" * 32)


class TestVerify:
    def test_untouched_model_matches(self, tmp_path):
        info = save_model(wide_network(), tmp_path / "m.bdnw")
        assert verify_model(info.path, info.digest) is True

    def test_single_weight_change_detected(self, tmp_path):
        net = wide_network()
        info = save_model(net, tmp_path / "m.bdnw")
        w = net.layer_weights(0).copy()
        w[3, 4] = np.nextafter(w[3, 4], np.float32(10))
        save_model(net.with_layer_weights(0, w), info.path)
        assert verify_model(info.path, info.digest) is False

    def test_other_algorithm_is_an_error(self, tmp_path):
        info = save_model(wide_network(), tmp_path / "m.bdnw")
        with pytest.raises(DigestError):
            verify_model(info.path, Digest.parse("md5:" + "00" * 16))
