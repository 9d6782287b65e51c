"""
Test cases for the VTF1 tensor codec, CSV/JSON helpers and checkpoints
"""
import numpy as np
import pytest

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from app.errors import DataError
from app.storage import (MAGIC, decode_tensor, encode_tensor, load_checkpoint, load_tensor, read_csv,
                         read_json, save_checkpoint, save_tensor, write_csv, write_json)


class TestTensorCodec:
    """VTF1 layout: magic, u32 rank, u32 extents, little-endian float64 payload"""

    def test_header_layout(self):
        blob = encode_tensor(np.zeros((2, 3)))
        assert blob[:4] == MAGIC
        assert np.frombuffer(blob[4:16], dtype="<u4").tolist() == [2, 2, 3]
        assert len(blob) == 16 + 6 * 8

    def test_payload_is_row_major(self):
        array = np.arange(6.0).reshape(2, 3)
        blob = encode_tensor(array)
        assert np.frombuffer(blob[16:], dtype="<f8").tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]

    def test_file_round_trip(self, tmp_path):
        array = np.random.default_rng(0).normal(size=(3, 4, 4))
        save_tensor(tmp_path / "nested" / "x.vtf", array)
        assert np.array_equal(load_tensor(tmp_path / "nested" / "x.vtf"), array)

    def test_scalar_rank_zero(self):
        assert decode_tensor(encode_tensor(np.float64(2.5))).shape == ()

    def test_bad_magic(self):
        with pytest.raises(DataError):
            decode_tensor(b"NOPE" + bytes(8))

    def test_truncated_payload(self):
        blob = encode_tensor(np.ones((2, 2)))
        with pytest.raises(DataError):
            decode_tensor(blob[:-8])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_tensor(tmp_path / "absent.vtf")


class TestTables:

    def test_csv_keeps_full_precision(self, tmp_path):
        value = 0.1 + 0.2
        write_csv(tmp_path / "t.csv", ["name", "value", "flag"], [["a", value, True]])
        row = read_csv(tmp_path / "t.csv")[0]
        assert float(row["value"]) == value
        assert row["flag"] == "1"

    def test_json_sorted_keys(self, tmp_path):
        write_json(tmp_path / "a.json", {"b": 1, "a": 2})
        text = (tmp_path / "a.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert read_json(tmp_path / "a.json") == {"a": 2, "b": 1}

    def test_checkpoint_round_trip(self, tmp_path):
        params = {"w": np.ones((2, 2)), "b": np.zeros(2)}
        save_checkpoint(tmp_path, {"depth": 1}, params)
        config, loaded = load_checkpoint(tmp_path)
        assert config == {"depth": 1}
        assert set(loaded) == {"w", "b"}
        assert np.array_equal(loaded["w"], params["w"])

    def test_malformed_checkpoint(self, tmp_path):
        write_json(tmp_path / "manifest.json", {"format": "other"})
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)
