import json
import struct

import numpy as np
import pytest

from geoformer.diffcore import CheckpointError, load_arrays, read_header, save_arrays


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(4,)),
        "step": np.array([12], dtype=np.int64),
    }
    p = tmp_path / "x.ckpt"
    save_arrays(p, arrays, meta={"config_hash": "abc"})
    back, meta = load_arrays(p)
    assert meta == {"config_hash": "abc"}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        assert back[k].tobytes() == v.tobytes()


def test_header_layout(tmp_path):
    p = tmp_path / "x.ckpt"
    save_arrays(p, {"a": np.arange(3, dtype=np.float64), "b": np.zeros((2, 2), np.float32)})
    raw = p.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    assert header == read_header(p)
    a, b = header["arrays"]
    assert (a["offset"], a["nbytes"]) == (0, 24)
    assert (b["offset"], b["nbytes"]) == (24, 16)
    payload = raw[16 + hlen:]
    assert np.frombuffer(payload[:24], "<f8").tolist() == [0.0, 1.0, 2.0]


def test_corrupt_payload_detected(tmp_path):
    p = tmp_path / "x.ckpt"
    save_arrays(p, {"a": np.ones(8)})
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_arrays(p)


def test_truncated_payload_detected(tmp_path):
    p = tmp_path / "x.ckpt"
    save_arrays(p, {"a": np.ones(8)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        load_arrays(p)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"hello world, definitely not")
    with pytest.raises(CheckpointError):
        load_arrays(p)
