"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PDRC"                 magic
    u32 version             currently 1
    u32 meta_len            followed by meta_len bytes of UTF-8 config text
    u32 n_tensors
    n_tensors x:
        u32 name_len, name (UTF-8)
        u32 ndim, ndim x u64 dims
        prod(dims) x f64 values (row-major)

Tensor names are the model's parameter/buffer names; auxiliary training
state uses names starting with ``train/``.
"""
from __future__ import annotations

import struct

import numpy as np

from .config import dump_config, parse_config
from .errors import BadMagicError, CheckpointError, CheckpointTruncatedError, VersionMismatchError
from .model import build_model

MAGIC = b"PDRC"
VERSION = 1


def write_tensors(meta, tensors):
    """Encode ``meta`` text and an ordered ``{name: array}`` mapping."""
    meta_b = meta.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated while reading {what} "
                                           f"(need {n} bytes at offset {self.pos}, have {len(self.data)})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(data):
    """Decode checkpoint bytes into ``(meta_text, {name: array})``."""
    data = bytes(data)
    if len(data) == 0:
        raise CheckpointTruncatedError("empty checkpoint")
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = r.take(meta_len, "metadata").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * n, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensor table")
    return meta, tensors


def serialize_model(model, extra=None, train=None, data=None):
    """Checkpoint bytes for ``model``; ``train``/``data`` sections ride along in the config text."""
    tensors = dict(model.state_dict())
    if extra:
        tensors.update(extra)
    return write_tensors(dump_config(model.cfg, train, data), tensors)


def deserialize_model(data, with_extra=False):
    """Rebuild a model from checkpoint bytes (architecture taken from the embedded config).

    With ``with_extra`` returns ``(model, train_tensors, run_config)``.
    """
    meta, tensors = read_tensors(data)
    run = parse_config(meta)
    model = build_model(run.arch, seed=0)
    model.load_state_dict(tensors)
    if with_extra:
        extra = {k: v for k, v in tensors.items() if k.startswith("train/")}
        return model, extra, run
    return model


def save_checkpoint(path, model, extra=None, train=None, data=None):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model, extra, train, data))


def load_checkpoint(path, with_extra=False):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize_model(raw, with_extra)
