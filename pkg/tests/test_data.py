import gzip

import numpy as np
import pytest

from pdrcaps.data import (Dataset, SyntheticSpec, augment, class_templates, encode_cifar10, encode_idx,
                          load_cifar10_binary, load_directory, load_idx, make_synthetic, parse_idx, train_val_split,
                          write_cifar10_binary, write_idx)
from pdrcaps.errors import CountMismatchError, DataError, FormatError, TruncationError


def test_single_pixel_idx(tmp_path):
    img = np.zeros((1, 2, 2), dtype=np.uint8)
    img[0, 1, 0] = 0xFF
    write_idx(tmp_path / "i", img)
    write_idx(tmp_path / "l", np.array([4], dtype=np.uint8))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 2, 2)
    assert ds.images[0, 0, 1, 0] == 1.0 and ds.images.sum() == 1.0
    assert ds.labels.tolist() == [4]


@pytest.mark.parametrize("seed", range(5))
def test_idx_roundtrip_random(tmp_path, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    img = rng.integers(0, 256, size=(n, 7, 5), dtype=np.uint8)
    lab = rng.integers(0, 10, size=n, dtype=np.uint8)
    with gzip.open(tmp_path / "i.gz", "wb") as fh:
        fh.write(encode_idx(img))
    write_idx(tmp_path / "l", lab)
    ds = load_idx(tmp_path / "i.gz", tmp_path / "l")
    assert np.array_equal((ds.images[:, 0] * 255).round().astype(np.uint8), img)
    assert np.array_equal(ds.labels, lab)


def test_idx_errors(tmp_path):
    with pytest.raises(TruncationError):
        parse_idx(b"\x00\x00")
    with pytest.raises(FormatError):
        parse_idx(b"\x01\x00\x08\x01" + bytes(8))
    good = encode_idx(np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(TruncationError):
        parse_idx(good[:-1])
    with pytest.raises(TruncationError):
        parse_idx(good[:8])
    with pytest.raises(FormatError):
        parse_idx(good + b"\0")
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_cifar_two_records(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(2, 3, 32, 32), dtype=np.uint8)
    write_cifar10_binary(tmp_path / "b.bin", img, [3, 7])
    ds = load_cifar10_binary(tmp_path / "b.bin")
    assert ds.labels.tolist() == [3, 7]
    assert np.array_equal((ds.images * 255).round().astype(np.uint8), img)


@pytest.mark.parametrize("seed", range(5))
def test_cifar_roundtrip_random_multi_file(tmp_path, seed):
    rng = np.random.default_rng(seed)
    parts = []
    for k in range(2):
        n = int(rng.integers(0, 5))
        img = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
        lab = rng.integers(0, 10, size=n)
        (tmp_path / f"{k}.bin").write_bytes(encode_cifar10(img, lab))
        parts.append((img, lab))
    with pytest.warns(UserWarning) if any(len(p[1]) == 0 for p in parts) else _null():
        ds = load_cifar10_binary([tmp_path / "0.bin", tmp_path / "1.bin"])
    img = np.concatenate([p[0] for p in parts])
    assert np.array_equal((ds.images * 255).round().astype(np.uint8), img)
    assert ds.labels.tolist() == np.concatenate([p[1] for p in parts]).tolist()


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def test_cifar_empty_file_warns(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.warns(UserWarning):
        ds = load_cifar10_binary(tmp_path / "e.bin")
    assert len(ds) == 0


def test_cifar_bad_length(tmp_path):
    (tmp_path / "x.bin").write_bytes(bytes(100))
    with pytest.raises(FormatError):
        load_cifar10_binary(tmp_path / "x.bin")


def test_load_directory_layouts(tmp_path):
    img = np.zeros((2, 3, 32, 32), dtype=np.uint8)
    nested = tmp_path / "cifar" / "cifar-10-batches-bin"
    nested.mkdir(parents=True)
    write_cifar10_binary(nested / "data_batch_1.bin", img, [1, 2])
    write_cifar10_binary(nested / "test_batch.bin", img[:1], [5])
    assert len(load_directory(tmp_path / "cifar", "train")) == 2
    assert load_directory(tmp_path / "cifar", "test").labels.tolist() == [5]
    idx = tmp_path / "idx"
    idx.mkdir()
    write_idx(idx / "t10k-images-idx3-ubyte", np.zeros((3, 4, 4), dtype=np.uint8))
    write_idx(idx / "t10k-labels-idx1-ubyte", np.zeros(3, dtype=np.uint8))
    assert len(load_directory(idx, "test")) == 3
    with pytest.raises(DataError):
        load_directory(idx, "train")
    with pytest.raises(DataError):
        load_directory(tmp_path / "missing", "train")


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.full((1, 1, 2, 2), 2.0), np.zeros(1, dtype=np.int64))
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((2, 1, 2, 2)), np.zeros(1, dtype=np.int64))
    ds = Dataset(np.zeros((2, 1, 2, 2)), np.zeros(2, dtype=np.int64))
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0


def test_synthetic_noise_free_identical_within_class():
    ds = make_synthetic(SyntheticSpec(classes=4, samples_per_class=3, noise=0.0))
    for k in range(4):
        block = ds.images[ds.labels == k]
        assert all(np.array_equal(block[0], b) for b in block)


def test_synthetic_deterministic():
    a, b = make_synthetic(SyntheticSpec(seed=5)), make_synthetic(SyntheticSpec(seed=5))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


def _nearest_template_accuracy(noise):
    spec = SyntheticSpec(classes=10, samples_per_class=40, image_size=16, noise=noise, seed=1)
    ds = make_synthetic(spec)
    t = class_templates(10, 16).reshape(10, -1)
    d = ((ds.images.reshape(len(ds), 1, -1) - t[None]) ** 2).sum(axis=2)
    return float((d.argmin(axis=1) == ds.labels).mean())


def test_nearest_template_oracle_sweep():
    accs = [_nearest_template_accuracy(s) for s in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert accs[0] == 1.0
    assert all(a >= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] < 0.9


def test_templates_distinct():
    t = class_templates(10, 16).reshape(10, -1)
    d = ((t[:, None] - t[None]) ** 2).sum(axis=2)
    assert (d + np.eye(10) * 1e9).min() > 0


def test_split_and_augment():
    ds = make_synthetic(SyntheticSpec(classes=2, samples_per_class=10))
    tr, va = train_val_split(ds, 0.1, seed=0)
    assert (len(tr), len(va)) == (18, 2)
    tr2, va2 = train_val_split(ds, 0.1, seed=0)
    assert np.array_equal(va.images, va2.images)
    out = augment(ds.images, np.random.default_rng(0), pad=2)
    assert out.shape == ds.images.shape
    assert np.array_equal(augment(ds.images, np.random.default_rng(0), pad=0, flip=False), ds.images)
