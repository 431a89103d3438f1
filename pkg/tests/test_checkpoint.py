import numpy as np
import pytest

from recttt import checkpoint as ck


@pytest.fixture
def sample(rng_np):
    tensors = {
        "enc1.stem.conv.weight": rng_np.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "scalar": np.array(1.5, np.float32),
        "bias": np.array([np.inf, -0.0, 1e-38], np.float32),
    }
    return ck.CheckpointFile({"kind": "recttt", "seed": 3, "epoch": 2, "config_hash": "abc"}, tensors)


def test_round_trip_bitwise(tmp_path, sample):
    path = ck.save_checkpoint(tmp_path / "m.rctt", sample)
    back = ck.load_checkpoint(path)
    assert back.metadata == sample.metadata
    assert list(back.tensors) == list(sample.tensors)
    for k, v in sample.tensors.items():
        assert back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


def test_layout(sample):
    buf = ck.encode(sample)
    assert buf[:4] == b"RCTT"
    assert int.from_bytes(buf[4:8], "little") == ck.VERSION


def test_bad_magic(sample):
    buf = bytearray(ck.encode(sample))
    buf[:4] = b"PK\x03\x04"
    with pytest.raises(ck.BadMagicError):
        ck.decode(bytes(buf))


def test_bad_version(sample):
    buf = bytearray(ck.encode(sample))
    buf[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(ck.BadVersionError):
        ck.decode(bytes(buf))


@pytest.mark.parametrize("cut", [2, 6, 11, 40, -1])
def test_truncated(sample, cut):
    buf = ck.encode(sample)
    with pytest.raises(ck.CheckpointError) as info:
        ck.decode(buf[:cut])
    assert isinstance(info.value, (ck.TruncatedError, ck.BadMagicError))
    if cut >= 8:
        assert isinstance(info.value, ck.TruncatedError)


def test_trailing_bytes(sample):
    with pytest.raises(ck.CheckpointError):
        ck.decode(ck.encode(sample) + b"\x00")


def test_load_into_checks_layout(sample):
    state = {k: np.zeros_like(v) for k, v in sample.tensors.items()}
    ck.load_into(state, sample.tensors)
    assert all(np.array_equal(state[k], v) for k, v in sample.tensors.items())
    with pytest.raises(ck.LayoutError):
        ck.load_into({"other": np.zeros(1, np.float32)}, sample.tensors)
    state["scalar"] = np.zeros(2, np.float32)
    with pytest.raises(ck.LayoutError):
        ck.load_into(state, sample.tensors)
