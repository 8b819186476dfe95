"""Dataset loaders (IDX, CIFAR-10 binary), writers for tests, and a synthetic generator."""
from __future__ import annotations

import gzip
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatchError, DataError, FormatError, TruncationError

# IDX element type codes
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


@dataclass(frozen=True)
class Dataset:
    """Images [N, C, H, W] in [0, 1] and integer labels [N]."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.images[index].copy(), self.labels[index].copy())

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))


def _open(path):
    path = os.fspath(path)
    with (gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")) as fh:
        return fh.read()


# --------------------------------------------------------------------------- IDX


def parse_idx(raw, what="idx"):
    """Decode an IDX byte string into a numpy array."""
    if len(raw) < 4:
        raise TruncationError(f"{what}: header truncated ({len(raw)} bytes)")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise FormatError(f"{what}: bad IDX magic {raw[:4].hex()}")
    if ndim == 0:
        raise FormatError(f"{what}: IDX file declares zero dimensions")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncationError(f"{what}: dimension table truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[dtype_code]
    need = int(np.prod(dims)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) < need:
        raise TruncationError(f"{what}: payload has {len(payload)} bytes, header declares {need}")
    if len(payload) > need:
        raise FormatError(f"{what}: {len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims)


def encode_idx(array):
    """Encode an unsigned-byte array in IDX format (inverse of :func:`parse_idx`)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("encode_idx writes unsigned bytes only")
    return struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape) \
        + array.tobytes()


def write_idx(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_idx(array))


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair (e.g. MNIST / Fashion-MNIST) scaled to [0, 1]."""
    images = parse_idx(_open(images_path), os.fspath(images_path))
    labels = parse_idx(_open(labels_path), os.fspath(labels_path))
    if images.dtype != np.dtype(">u1") or labels.dtype != np.dtype(">u1"):
        raise FormatError("expected unsigned-byte IDX files (type 0x08)")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim != 4:
        raise FormatError(f"image file must be 3-D or 4-D, got {images.ndim}-D")
    if labels.ndim != 1:
        raise FormatError(f"label file must be 1-D, got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


# --------------------------------------------------------------------------- CIFAR-10


def parse_cifar10(raw, what="cifar"):
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{what}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def encode_cifar10(images, labels):
    """Encode uint8 images [N, 3, 32, 32] and labels [N] as CIFAR-10 binary records."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32) or images.shape[0] != labels.shape[0]:
        raise FormatError(f"CIFAR records need [N, 3, 32, 32] images, got {images.shape}")
    out = np.empty((images.shape[0], CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(images.shape[0], CIFAR_RECORD - 1)
    return out.tobytes()


def write_cifar10_binary(path, images, labels):
    with open(path, "wb") as fh:
        fh.write(encode_cifar10(images, labels))


def load_cifar10_binary(paths):
    """Load one or more CIFAR-10 ``.bin`` batch files, concatenated in the given order."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _open(path)
        if not raw:
            warnings.warn(f"{os.fspath(path)} is empty; contributing no samples", stacklevel=2)
            continue
        im, lb = parse_cifar10(raw, os.fspath(path))
        images.append(im)
        labels.append(lb)
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64))
    return Dataset(np.concatenate(images).astype(np.float64) / 255.0, np.concatenate(labels))


_IDX_PAIRS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        p = os.path.join(directory, name)
        if os.path.exists(p):
            return p
    return None


def load_directory(directory, split="train"):
    """Detect the dataset layout in ``directory`` and load ``split`` ("train" or "test").

    CIFAR-10 binary (``data_batch_*.bin`` / ``test_batch.bin``) and IDX pairs
    (``train-images-idx3-ubyte`` ...) are recognized, optionally gzipped.
    """
    if not os.path.isdir(directory):
        raise DataError(f"data directory {directory} does not exist")
    cifar_dir = directory
    nested = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        cifar_dir = nested
    if split == "train":
        batches = [os.path.join(cifar_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
        batches = [b for b in batches if os.path.exists(b)]
    else:
        batches = [p for p in [os.path.join(cifar_dir, "test_batch.bin")] if os.path.exists(p)]
    if batches:
        return load_cifar10_binary(batches)
    img_name, lbl_name = _IDX_PAIRS[split]
    img, lbl = _find(directory, img_name), _find(directory, lbl_name)
    if img and lbl:
        return load_idx(img, lbl)
    raise DataError(f"no CIFAR-10 binary or IDX {split} files found in {directory}")


# --------------------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    samples_per_class: int = 10
    image_size: int = 16
    channels: int = 1
    noise: float = 0.1
    seed: int = 0


def class_templates(classes, image_size, channels=1):
    """One oriented stripe pattern per class, values in [0.1, 0.9].

    Orientation and stripe period both vary with the class index so every
    template is distinct.
    """
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    yy = (yy + 0.5) / image_size - 0.5
    xx = (xx + 0.5) / image_size - 0.5
    out = np.empty((classes, channels, image_size, image_size))
    for k in range(classes):
        angle = np.pi * k / classes
        period = 0.5 if k % 2 == 0 else 0.34
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        stripes = (np.floor(proj / (period / 2)) % 2 == 0).astype(np.float64)
        for c in range(channels):
            out[k, c] = 0.1 + 0.8 * (stripes if c % 2 == 0 else 1.0 - stripes)
    return out


def make_synthetic(spec=SyntheticSpec()):
    """Templates plus seeded Gaussian noise, clipped to [0, 1].

    Labels cycle 0, 1, ..., k-1, 0, 1, ... so any prefix stays class-balanced.
    """
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec.classes, spec.image_size, spec.channels)
    labels = np.tile(np.arange(spec.classes), spec.samples_per_class)
    images = templates[labels]
    if spec.noise > 0:
        images = images + rng.normal(0.0, spec.noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64))


# --------------------------------------------------------------------------- splits / augmentation


def train_val_split(dataset, val_fraction, seed):
    """Seeded shuffle, then the first ``round(val_fraction * N)`` samples become validation."""
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def augment(images, rng, pad=4, flip=True):
    """Random pad-and-crop plus horizontal flip, per sample."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
