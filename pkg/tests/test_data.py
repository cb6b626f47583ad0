import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixdefense.data import (Batch, CifarFormatError, IdxMagicError,
                             IdxTruncatedError, LabelCountMismatchError,
                             LabeledDataset, batches, load_cifar_binary,
                             load_mnist_idx, train_validation_split,
                             write_cifar_binary, write_mnist_idx)


def write_idx_fixture(tmp_path, pixels, labels, image_magic=2051, label_magic=2049,
                      truncate_images=0):
    """Emit IDX bytes by hand (independent of the package's serializer)."""
    n, h, w = pixels.shape
    img_bytes = struct.pack(">iiii", image_magic, n, h, w)
    for i in range(n):
        for r in range(h):
            for c in range(w):
                img_bytes += struct.pack("B", int(pixels[i, r, c]))
    if truncate_images:
        img_bytes = img_bytes[:-truncate_images]
    lab_bytes = struct.pack(">ii", label_magic, len(labels))
    for v in labels:
        lab_bytes += struct.pack("B", int(v))
    ip, lp = tmp_path / "images.idx", tmp_path / "labels.idx"
    ip.write_bytes(img_bytes)
    lp.write_bytes(lab_bytes)
    return ip, lp


@pytest.fixture()
def idx3(tmp_path):
    pixels = np.array([np.full((4, 4), 0), np.full((4, 4), 128), np.full((4, 4), 255)],
                      dtype=np.uint8)
    pixels[0, 1, 2] = 17
    return write_idx_fixture(tmp_path, pixels, [0, 1, 2]), pixels


def test_idx_fixture_loads_exact(idx3):
    (ip, lp), pixels = idx3
    ds = load_mnist_idx(ip, lp)
    assert len(ds) == 3
    assert ds.class_count == 10
    assert ds.image_shape == (4, 4, 1)
    assert list(ds.labels) == [0, 1, 2]
    np.testing.assert_array_equal(np.round(ds.images[..., 0] * 255).astype(np.uint8), pixels)
    assert ds.images.dtype == np.float32


def test_idx_round_trip_bytes(idx3, tmp_path):
    (ip, lp), _ = idx3
    ds = load_mnist_idx(ip, lp)
    ip2, lp2 = tmp_path / "i2.idx", tmp_path / "l2.idx"
    write_mnist_idx(ds, ip2, lp2)
    assert ip2.read_bytes() == ip.read_bytes()
    assert lp2.read_bytes() == lp.read_bytes()


def test_idx_swapped_magic_rejected(tmp_path):
    pixels = np.zeros((2, 3, 3), dtype=np.uint8)
    ip, lp = write_idx_fixture(tmp_path, pixels, [1, 2], image_magic=2049, label_magic=2051)
    with pytest.raises(IdxMagicError):
        load_mnist_idx(ip, lp)


def test_idx_truncated_rejected(tmp_path):
    pixels = np.zeros((2, 3, 3), dtype=np.uint8)
    ip, lp = write_idx_fixture(tmp_path, pixels, [1, 2], truncate_images=4)
    with pytest.raises(IdxTruncatedError):
        load_mnist_idx(ip, lp)


def test_idx_count_mismatch_rejected(tmp_path):
    pixels = np.zeros((2, 3, 3), dtype=np.uint8)
    ip, _ = write_idx_fixture(tmp_path, pixels, [1, 2])
    _, lp = write_idx_fixture(tmp_path, pixels[:1], [1])
    with pytest.raises(LabelCountMismatchError):
        load_mnist_idx(ip, lp)


def _cifar_record(label, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    planar = rng.integers(0, 256, size=3 * 32 * 32, dtype=np.uint8)
    return struct.pack("B", label) + planar.tobytes(), planar


def test_cifar_fixture_round_trip(tmp_path):
    rec0, planar0 = _cifar_record(3, 0)
    rec1, planar1 = _cifar_record(7, 1)
    path = tmp_path / "batch.bin"
    path.write_bytes(rec0 + rec1)
    ds = load_cifar_binary([path])
    assert len(ds) == 2
    assert ds.image_shape == (32, 32, 3)
    assert list(ds.labels) == [3, 7]
    # channel-planar R,G,B decode check against the raw bytes
    got = np.round(ds.images[0] * 255).astype(np.uint8)
    np.testing.assert_array_equal(got.transpose(2, 0, 1).ravel(), planar0)
    np.testing.assert_array_equal(
        np.round(ds.images[1] * 255).astype(np.uint8).transpose(2, 0, 1).ravel(), planar1)
    # module serializer reproduces the handwritten bytes
    out = tmp_path / "roundtrip.bin"
    write_cifar_binary(ds, out)
    assert out.read_bytes() == rec0 + rec1


def test_cifar_bad_size_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 3072)  # one byte short of a record
    with pytest.raises(CifarFormatError):
        load_cifar_binary([path])


def test_cifar_empty_paths_rejected():
    with pytest.raises(ValueError):
        load_cifar_binary([])


def _tiny_dataset(n=10, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return LabeledDataset(images=rng.uniform(0, 1, (n, 4, 4, 1)).astype(np.float32),
                          labels=rng.integers(0, 10, n), class_count=10,
                          name="tiny", split="train")


def test_batches_sizes_and_order():
    ds = _tiny_dataset(10)
    bs = batches(ds, 3, shuffle=False)
    assert [len(b) for b in bs] == [3, 3, 3, 1]
    np.testing.assert_array_equal(np.concatenate([b.indices for b in bs]), np.arange(10))
    np.testing.assert_array_equal(bs[0].images, ds.images[:3])


def test_batches_seed_determinism():
    ds = _tiny_dataset(50)
    a = batches(ds, 7, seed=3, shuffle=True)
    b = batches(ds, 7, seed=3, shuffle=True)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.indices, y.indices)
        np.testing.assert_array_equal(x.images, y.images)


def test_batches_different_seeds_same_multiset():
    ds = _tiny_dataset(100)
    a = np.concatenate([b.indices for b in batches(ds, 9, seed=1, shuffle=True)])
    b = np.concatenate([b.indices for b in batches(ds, 9, seed=2, shuffle=True)])
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(np.sort(a), np.sort(b))


def test_batches_invalid_sizes():
    ds = _tiny_dataset(10)
    with pytest.raises(ValueError):
        batches(ds, 0)
    with pytest.raises(ValueError):
        batches(ds, 11)


@given(n=st.integers(1, 60), batch_size=st.integers(1, 60), seed=st.integers(0, 5))
def test_batching_is_partition(n, batch_size, seed):
    if batch_size > n:
        batch_size = n
    ds = _tiny_dataset(n, seed=1)
    got = np.concatenate([b.indices for b in batches(ds, batch_size, seed=seed, shuffle=True)])
    np.testing.assert_array_equal(np.sort(got), np.arange(n))


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(images=np.zeros((0, 4, 4, 1), np.float32), labels=np.zeros(0, np.int64),
                       class_count=10, name="x", split="train")
    with pytest.raises(ValueError):
        LabeledDataset(images=np.full((2, 4, 4, 1), 1.5, np.float32),
                       labels=np.zeros(2, np.int64), class_count=10, name="x", split="train")
    with pytest.raises(ValueError):
        LabeledDataset(images=np.zeros((2, 4, 4, 2), np.float32),
                       labels=np.zeros(2, np.int64), class_count=10, name="x", split="train")


def test_loaded_pixels_normalized(idx3):
    (ip, lp), _ = idx3
    ds = load_mnist_idx(ip, lp)
    assert ds.images.min() >= 0.0
    assert ds.images.max() <= 1.0


def test_train_validation_split_partition():
    ds = _tiny_dataset(40)
    train, val = train_validation_split(ds, 0.25, seed=5)
    assert len(val) == 10 and len(train) == 30
    combined = np.concatenate([train.images, val.images])
    assert combined.shape[0] == 40
