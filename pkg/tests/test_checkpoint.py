import struct

import numpy as np
import pytest

from pdrcaps.checkpoint import (MAGIC, deserialize_model, load_checkpoint, read_tensors, save_checkpoint,
                                serialize_model, write_tensors)
from pdrcaps.errors import (BadMagicError, CheckpointError, CheckpointMismatchError, CheckpointTruncatedError,
                            VersionMismatchError)
from pdrcaps.model import build_model, small_synthetic


def _model(seed=0):
    return build_model(small_synthetic(image_size=12, width=6, decoder_hidden=(8,)), seed=seed)


def test_roundtrip_bitwise_forward():
    model = _model(3)
    # perturb buffers so they are not at their defaults
    x = np.random.default_rng(0).uniform(size=(4, 1, 12, 12))
    model.forward(x, training=True)
    clone = deserialize_model(serialize_model(model))
    a, _ = model.forward(x)
    b, _ = clone.forward(x)
    assert np.array_equal(a, b)
    for (na, ta), (nb, tb) in zip(model.state_dict().items(), clone.state_dict().items()):
        assert na == nb and np.array_equal(ta, tb)


def test_extra_tensors_and_sections(tmp_path):
    model = _model()
    path = tmp_path / "m.pdrc"
    save_checkpoint(path, model, {"train/x": np.arange(3.0)}, {"lr": "0.1"}, {"source": "synthetic"})
    clone, extra, run = load_checkpoint(path, with_extra=True)
    assert extra["train/x"].tolist() == [0.0, 1.0, 2.0]
    assert run.train == {"lr": "0.1"} and run.data == {"source": "synthetic"}


def test_write_read_tensors_scalar_and_empty():
    data = write_tensors("meta", {"a": np.float64(2.5), "b": np.zeros((0, 3))})
    meta, tensors = read_tensors(data)
    assert meta == "meta" and tensors["a"].shape == () and tensors["b"].shape == (0, 3)


def test_empty_file_is_truncation():
    with pytest.raises(CheckpointTruncatedError):
        read_tensors(b"")


def test_wrong_magic():
    with pytest.raises(BadMagicError):
        read_tensors(b"XXXX" + bytes(20))


def test_version_mismatch():
    data = bytearray(write_tensors("", {}))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        read_tensors(bytes(data))


@pytest.mark.parametrize("cut", [3, 9, 30, -1])
def test_truncated(cut):
    data = serialize_model(_model())
    with pytest.raises(CheckpointTruncatedError):
        read_tensors(data[:cut])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        read_tensors(write_tensors("", {}) + b"\0")


def test_architecture_mismatch():
    meta, tensors = read_tensors(serialize_model(_model()))
    del tensors["branch1.routing.weight"]
    with pytest.raises(CheckpointMismatchError):
        deserialize_model(write_tensors(meta, tensors))
    assert MAGIC == b"PDRC"


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.pdrc")
