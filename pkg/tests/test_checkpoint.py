import struct

import numpy as np
import pytest

from acam.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


def test_round_trip(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "c": np.arange(6, dtype=np.int64).reshape(2, 3),
        "scalar": np.array(1.5, np.float32),
    }
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"note": "hi", "k": 3})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(tensors) and meta == {"note": "hi", "k": 3}
    for n in tensors:
        assert back[n].dtype == tensors[n].dtype
        assert np.array_equal(back[n], tensors[n])


def test_layout(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"w": np.array([1.0, 2.0], np.float32)})
    buf = (tmp_path / "x.ckpt").read_bytes()
    assert buf[:8] == MAGIC
    version, reserved, mlen = struct.unpack("<IIQ", buf[8:24])
    assert (version, reserved) == (1, 0)
    start = 24 + mlen + (-(24 + mlen)) % 8
    assert start % 8 == 0
    assert np.frombuffer(buf[start:], "<f4").tolist() == [1.0, 2.0]


def test_bytes_deterministic(tmp_path):
    t = {"w": np.ones((2, 2), np.float32)}
    save_checkpoint(tmp_path / "a", t, {"z": 1, "a": 2})
    save_checkpoint(tmp_path / "b", t, {"a": 2, "z": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_truncated(tmp_path):
    save_checkpoint(tmp_path / "x", {"w": np.ones(100)})
    buf = (tmp_path / "x").read_bytes()
    (tmp_path / "x").write_bytes(buf[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "x")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", {"w": np.ones(2, np.complex64)})
