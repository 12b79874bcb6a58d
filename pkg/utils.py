"""Utility functions: dataset download and IDX parsing."""

import gzip
import os
import struct
import tempfile
from typing import Optional, Tuple

import numpy as np
import requests
from loguru import logger

import config


def download_file(url: str, dest: Optional[str] = None) -> str:
    """
    Download a file from URL.

    Args:
        url: URL of the file to download
        dest: Destination path; a temporary file is used when omitted

    Returns:
        Path to the downloaded file

    Raises:
        requests.RequestException: If download fails
    """
    response = requests.get(url, timeout=config.DOWNLOAD_TIMEOUT)
    response.raise_for_status()

    if dest is None:
        fd, dest = tempfile.mkstemp(suffix=os.path.splitext(url)[1])
        with os.fdopen(fd, "wb") as f:
            f.write(response.content)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(dest)), exist_ok=True)
        with open(dest, "wb") as f:
            f.write(response.content)

    return dest


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: str, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Read an IDX file (optionally gzipped) into a uint8 array.

    Args:
        path: File to read
        expected_magic: Magic number to enforce (0x803 images, 0x801 labels)

    Returns:
        Array shaped by the header dimensions

    Raises:
        ValueError: If the magic number or payload size is wrong
    """
    with _open_maybe_gzip(path) as f:
        magic = struct.unpack(">I", f.read(4))[0]
        if expected_magic is not None and magic != expected_magic:
            raise ValueError(f"{path}: bad IDX magic {magic:#010x}, expected {expected_magic:#010x}")
        dims = magic & 0xFF
        shape = tuple(struct.unpack(">I", f.read(4))[0] for _ in range(dims))
        data = np.frombuffer(f.read(), dtype=np.uint8)

    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {data.size} bytes, header says {shape}")
    return data.reshape(shape)


def _locate(data_dir: str, name: str, download: bool) -> str:
    for candidate in (name, name[:-3] if name.endswith(".gz") else name):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    if not download:
        raise FileNotFoundError(f"{name} not found in {data_dir}")
    logger.info(f"Downloading {name} to {data_dir}")
    return download_file(config.MNIST_MIRROR + name, os.path.join(data_dir, name))


def load_mnist(
    data_dir: str,
    train_size: Optional[int] = None,
    test_size: Optional[int] = None,
    download: bool = False,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Load MNIST with pixels scaled to [0, 1] and images flattened to 784 features.

    Args:
        data_dir: Directory holding the four IDX files
        train_size: Keep only the first train_size training samples
        test_size: Keep only the first test_size test samples
        download: Fetch missing files from the configured mirror

    Returns:
        (train_features, train_labels, test_features, test_labels)
    """
    files = config.MNIST_FILES
    images = {}
    labels = {}
    for split in ("train", "test"):
        img = read_idx(_locate(data_dir, files[f"{split}_images"], download), config.IDX_IMAGES_MAGIC)
        lab = read_idx(_locate(data_dir, files[f"{split}_labels"], download), config.IDX_LABELS_MAGIC)
        images[split] = img.reshape(img.shape[0], -1).astype(np.float64) / 255.0
        labels[split] = lab.astype(np.int64)

    X_tr, y_tr = images["train"][:train_size], labels["train"][:train_size]
    X_te, y_te = images["test"][:test_size], labels["test"][:test_size]
    logger.debug(f"MNIST loaded: {X_tr.shape[0]} train / {X_te.shape[0]} test")
    return X_tr, y_tr, X_te, y_te


def make_blobs(
    num_samples: int,
    num_classes: int,
    dimension: int,
    seed: int,
    spread: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters; a stand-in for MNIST when no data directory is configured."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.5, size=(num_classes, dimension))
    labels = rng.integers(0, num_classes, size=num_samples)
    features = centers[labels] + spread * rng.normal(size=(num_samples, dimension))
    return features, labels
