import gzip
import struct

import numpy as np
import pytest

import config
from utils import load_mnist, make_blobs, read_idx


def write_idx(path, array, compress=False):
    header = struct.pack(">I", 0x0800 | array.ndim) + b"".join(struct.pack(">I", s) for s in array.shape)
    payload = header + array.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(payload)


@pytest.mark.parametrize("compress", [False, True])
def test_read_idx(tmp_path, compress):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = str(tmp_path / "images.idx")
    write_idx(path, images, compress)
    out = read_idx(path, config.IDX_IMAGES_MAGIC)
    assert out.dtype == np.uint8
    assert np.array_equal(out, images)


def test_read_idx_rejects_bad_files(tmp_path):
    labels = np.array([3, 1, 4], dtype=np.uint8)
    path = str(tmp_path / "labels.idx")
    write_idx(path, labels)
    with pytest.raises(ValueError, match="magic"):
        read_idx(path, config.IDX_IMAGES_MAGIC)

    with open(path, "rb") as f:
        truncated = f.read()[:-1]
    with open(path, "wb") as f:
        f.write(truncated)
    with pytest.raises(ValueError, match="payload"):
        read_idx(path, config.IDX_LABELS_MAGIC)


def test_load_mnist_from_local_files(tmp_path):
    rng = np.random.default_rng(0)
    splits = {"train": 12, "test": 5}
    for split, count in splits.items():
        write_idx(str(tmp_path / config.MNIST_FILES[f"{split}_images"]),
                  rng.integers(0, 256, size=(count, 28, 28)), compress=True)
        write_idx(str(tmp_path / config.MNIST_FILES[f"{split}_labels"]),
                  rng.integers(0, 10, size=count), compress=True)

    X_tr, y_tr, X_te, y_te = load_mnist(str(tmp_path), train_size=10)
    assert X_tr.shape == (10, 784) and y_tr.shape == (10,)
    assert X_te.shape == (5, 784) and y_te.shape == (5,)
    assert 0.0 <= X_tr.min() and X_tr.max() <= 1.0
    assert y_tr.dtype == np.int64


def test_load_mnist_without_download_needs_the_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(str(tmp_path))


def test_make_blobs_is_seeded():
    X, y = make_blobs(50, 3, 4, seed=2)
    assert X.shape == (50, 4)
    assert set(np.unique(y)) <= {0, 1, 2}
    X2, y2 = make_blobs(50, 3, 4, seed=2)
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
