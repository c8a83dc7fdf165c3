import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeadv.data import (
    DataFormatError,
    Dataset,
    augment,
    batches,
    load_cifar_binary,
    load_idx,
    save_idx,
    synth_blobs,
    write_cifar_binary,
)

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def _idx_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", 0x803, len(images), 2, 2) + bytes(np.asarray(images, np.uint8).ravel()))
    lp.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))
    return ip, lp


def test_load_hand_built_idx(tmp_path):
    ip, lp = _idx_pair(tmp_path, [[[0, 255], [7, 8]], [[1, 2], [3, 4]]], [3, 9])
    ds = load_idx(ip, lp)
    assert len(ds) == 2 and ds.images.shape == (2, 2, 2)
    assert ds.images[0].tolist() == [[0.0, 255.0], [7.0, 8.0]]
    assert ds.labels.tolist() == [3, 9]
    assert ds.value_range == (0.0, 255.0)


def test_idx_truncated_payload(tmp_path):
    ip, lp = _idx_pair(tmp_path, [[[0, 1], [2, 3]]], [1])
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="expected 4 bytes, got 3"):
        load_idx(ip, lp)


def test_idx_bad_magic_and_count_mismatch(tmp_path):
    ip, lp = _idx_pair(tmp_path, [[[0, 1], [2, 3]]], [1])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(lp, ip)
    lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 2]))
    with pytest.raises(DataFormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, (5, 3, 4)).astype(np.float32), rng.integers(0, 10, 5), (0.0, 255.0), 10)
    save_idx(ds, tmp_path / "i.gz", tmp_path / "l.gz")
    back = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.fingerprint() == ds.fingerprint()


@pytest.mark.skipif(not MNIST_DIR.exists(), reason="MNIST subset not generated")
def test_mnist_subset_files():
    tr = load_idx(MNIST_DIR / "train-images-idx3-ubyte.gz", MNIST_DIR / "train-labels-idx1-ubyte.gz")
    assert tr.images.shape == (4000, 28, 28)
    assert np.bincount(tr.labels).tolist() == [400] * 10
    raw = gzip.decompress((MNIST_DIR / "val-images-idx3-ubyte.gz").read_bytes())
    assert struct.unpack(">IIII", raw[:16]) == (0x803, 1000, 28, 28)


def test_cifar_single_record(tmp_path):
    path = tmp_path / "data_batch_1.bin"
    write_cifar_binary(path, np.full((1, 3072), 128), [7])
    assert path.stat().st_size == 3073
    ds = load_cifar_binary([path])
    assert len(ds) == 1 and ds.labels.tolist() == [7]
    assert ds.images.shape == (1, 3, 32, 32) and (ds.images == 128.0).all()


def test_cifar_channel_major_layout(tmp_path):
    rec = np.zeros(3072, np.uint8)
    rec[1024] = 200  # first green pixel
    path = tmp_path / "b.bin"
    write_cifar_binary(path, rec[None], [0])
    assert load_cifar_binary(path).images[0, 1, 0, 0] == 200.0


def test_cifar_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3074))
    with pytest.raises(DataFormatError, match="multiple of 3073"):
        load_cifar_binary(path)
    path.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(DataFormatError, match="label"):
        load_cifar_binary(path)


def test_blobs_deterministic_and_in_range():
    a = synth_blobs(3, 50, 5, 4.0, seed=1)
    b = synth_blobs(3, 50, 5, 4.0, seed=1)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [50, 50, 50]


def test_blobs_are_linearly_separable():
    ds = synth_blobs(2, 500, 2, 10.0, seed=0)
    # least-squares linear classifier, independent of the training code
    X = np.c_[ds.images, np.ones(len(ds))]
    w, *_ = np.linalg.lstsq(X, 2.0 * ds.labels - 1, rcond=None)
    assert ((X @ w > 0) == ds.labels).mean() >= 0.99


def test_batch_sizes_and_order():
    ds = synth_blobs(2, 5, 2, 1.0, seed=0)
    bs = batches(ds, 4, shuffle=False)
    assert [len(b.y) for b in bs] == [4, 4, 2]
    assert np.concatenate([b.index for b in bs]).tolist() == list(range(10))
    a = [b.index.tolist() for b in batches(ds, 4, seed=3)]
    assert a == [b.index.tolist() for b in batches(ds, 4, seed=3)]
    with pytest.raises(ValueError):
        batches(ds, 0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), bs=st.integers(1, 50), seed=st.integers(0, 1000))
def test_batches_partition_dataset(n, bs, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.random((n, 3)).astype(np.float32), rng.integers(0, 2, n), (0.0, 1.0), 2)
    parts = batches(ds, bs, seed=seed)
    idx = np.concatenate([b.index for b in parts])
    assert sorted(idx.tolist()) == list(range(n))
    x = np.concatenate([b.x for b in parts])
    back = np.empty_like(x)
    back[idx] = x
    assert np.array_equal(back, ds.images)


def test_dataset_invariants():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 2), np.float32), np.zeros(3, int), (0.0, 1.0), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.full((1, 2), 2.0, np.float32), np.zeros(1, int), (0.0, 1.0), 2)
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((1, 2), np.float32), np.array([5]), (0.0, 1.0), 2)


def test_per_class_subset():
    ds = synth_blobs(3, 10, 3, 2.0, seed=0)
    sub = ds.per_class(4)
    assert np.bincount(sub.labels).tolist() == [4, 4, 4]


def test_augment_is_seeded():
    x = np.random.default_rng(0).random((3, 1, 6, 6)).astype(np.float32)
    a = augment(x, np.random.default_rng(1), pad=2, flip=True)
    b = augment(x, np.random.default_rng(1), pad=2, flip=True)
    assert np.array_equal(a, b) and a.shape == x.shape
