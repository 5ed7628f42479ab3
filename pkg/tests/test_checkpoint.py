import struct

import numpy as np
import pytest

from splitgs.checkpoint import MAGIC, VERSION, CheckpointError, read_container, write_container


def _arrays(rng):
    return {"pos": rng.normal(size=(7, 3)), "bits": np.array([True, False, True]),
            "idx": np.arange(5, dtype=np.int32), "empty": np.zeros((0, 4))}


def test_round_trip(rng, tmp_path):
    arrays = _arrays(rng)
    write_container(tmp_path / "c.bin", arrays, {"step": 3, "name": "x"})
    back, meta = read_container(tmp_path / "c.bin")
    assert meta == {"step": 3, "name": "x"}
    np.testing.assert_array_equal(back["pos"], arrays["pos"].astype(np.float32))
    assert back["pos"].dtype == np.float32
    assert back["bits"].dtype == np.uint8 and list(back["bits"]) == [1, 0, 1]
    assert back["idx"].dtype == np.int64 and list(back["idx"]) == list(range(5))
    assert back["empty"].shape == (0, 4)
    assert list(tmp_path.iterdir()) == [tmp_path / "c.bin"]


def test_bytes_are_reproducible(rng, tmp_path):
    arrays = _arrays(rng)
    write_container(tmp_path / "a", arrays, {"k": 1})
    write_container(tmp_path / "b", arrays, {"k": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_rejects_bad_files(rng, tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, _arrays(rng))
    raw = path.read_bytes()
    cases = {
        "magic": b"NOTMAGIC" + raw[8:],
        "version": MAGIC + struct.pack("<I", VERSION + 1) + raw[12:],
        "header": raw[:20] + b"\xff" + raw[21:],
        "short header": raw[:30],
        "payload": raw[:-8],
    }
    for name, data in cases.items():
        path.write_bytes(data)
        with pytest.raises(CheckpointError):
            read_container(path)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        write_container(tmp_path / "c", {"s": np.array(["a"])})
    assert not list(tmp_path.iterdir())
