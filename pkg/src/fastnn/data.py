"""MNIST IDX and CIFAR-10 binary ingestion, scaling and mini-batch iteration.

Cache layout under ``FASTNN_DATA_DIR`` (default ``~/.cache/fastnn``)::

    mnist/train-images-idx3-ubyte      (a .gz sibling is also accepted)
    mnist/train-labels-idx1-ubyte
    mnist/t10k-images-idx3-ubyte
    mnist/t10k-labels-idx1-ubyte
    cifar-10-batches-bin/data_batch_{1..5}.bin
    cifar-10-batches-bin/test_batch.bin
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import shutil
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config
from .errors import ConsistencyError, DataMissingError, FormatError, TruncatedFileError
from .tensor import DTYPE

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}

MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"


@dataclass
class Dataset:
    images: np.ndarray      # n x c x h x w, float32
    labels: np.ndarray      # n, int64
    name: str = ""
    split: str = ""
    n_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, split="") -> Dataset:
    """Parse an IDX image/label pair into ``n x 1 x rows x cols`` floats in [0, 255]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None].astype(DTYPE), labels.astype(np.int64), "mnist", split)


def write_idx_images(images, path) -> None:
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    body = np.asarray(images).astype(np.uint8).tobytes()
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + body)


def write_idx_labels(labels, path) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ------------------------------------------------------------------ CIFAR-10

def load_cifar10(paths, split="") -> Dataset:
    """Concatenate CIFAR-10 binary batches into ``n x 3 x 32 x 32`` floats in [0, 255]."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of "
                              f"{CIFAR_RECORD}-byte records")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(labels)
    if labels.max(initial=0) > 9:
        raise FormatError(f"label {labels.max()} out of range for CIFAR-10")
    return Dataset(np.concatenate(images).astype(DTYPE), labels, "cifar10", split)


def write_cifar10(images, labels, path) -> None:
    images = np.asarray(images).astype(np.uint8).reshape(len(labels), -1)
    if images.shape[1] != CIFAR_RECORD - 1:
        raise FormatError(f"CIFAR-10 records hold 3072 pixels, got {images.shape[1]}")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ----------------------------------------------------------- preprocessing

def scale_pre(ds: Dataset, divisor) -> Dataset:
    if divisor <= 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    return replace(ds, images=(ds.images / np.float32(divisor)).astype(DTYPE))


def standardize(ds: Dataset, mean=None, std=None) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Per-channel zero mean / unit variance; pass train statistics for the test split."""
    if mean is None:
        mean = ds.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        std = ds.images.std(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    out = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=out.astype(DTYPE)), mean, std


def subset(ds: Dataset, n: int | None) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    if n < 1:
        raise ValueError(f"subset size must be >= 1, got {n}")
    return replace(ds, images=ds.images[:n], labels=ds.labels[:n])


def one_hot(labels, n_classes=10) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1
    return out


def batch_indices(n, batch_size, seed=None):
    """Seeded permutation of range(n) cut into contiguous batches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(n) if seed is not None else np.arange(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def batch_iterator(ds: Dataset, batch_size, seed=None):
    """Yield ``(x, y_one_hot)`` mini-batches in a seeded shuffled order."""
    for idx in batch_indices(len(ds), batch_size, seed):
        yield ds.images[idx], one_hot(ds.labels[idx], ds.n_classes)


# -------------------------------------------------------------------- cache

def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise DataMissingError(
        f"{directory / name} not found; run `fastnn-bench fetch` or place the files under "
        f"$FASTNN_DATA_DIR (currently {config.data_dir()})")


def mnist(split="train", data_dir=None) -> Dataset:
    root = Path(data_dir or config.data_dir()) / "mnist"
    images, labels = MNIST_FILES[split]
    return load_mnist_idx(_find(root, images), _find(root, labels), split)


def cifar10(split="train", data_dir=None) -> Dataset:
    root = Path(data_dir or config.data_dir()) / "cifar-10-batches-bin"
    return load_cifar10([_find(root, f) for f in CIFAR_FILES[split]], split)


def available(name, data_dir=None) -> bool:
    """True when every file of dataset ``name`` is in the cache."""
    root = Path(data_dir or config.data_dir())
    if name == "mnist":
        root, files = root / "mnist", MNIST_FILES
    elif name == "cifar10":
        root, files = root / "cifar-10-batches-bin", CIFAR_FILES
    else:
        raise ValueError(f"unknown dataset {name!r}")
    try:
        for split in files.values():
            for f in split:
                _find(root, f)
    except DataMissingError:
        return False
    return True


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, md5: str) -> Path:
    if dest.exists() and _md5(dest) == md5:
        return dest
    log.info("downloading %s", url)
    tmp = dest.with_suffix(dest.suffix + ".part")
    with urllib.request.urlopen(url, timeout=60) as r, open(tmp, "wb") as f:
        shutil.copyfileobj(r, f)
    if _md5(tmp) != md5:
        tmp.unlink()
        raise FormatError(f"checksum mismatch for {url}")
    tmp.rename(dest)
    return dest


def fetch_mnist(data_dir=None) -> Path:
    root = Path(data_dir or config.data_dir()) / "mnist"
    root.mkdir(parents=True, exist_ok=True)
    for name, md5 in MNIST_MD5.items():
        _download(MNIST_URL + name, root / name, md5)
    return root


def fetch_cifar10(data_dir=None) -> Path:
    base = Path(data_dir or config.data_dir())
    base.mkdir(parents=True, exist_ok=True)
    archive = _download(CIFAR_URL, base / "cifar-10-binary.tar.gz", CIFAR_MD5)
    with tarfile.open(archive) as tar:
        if hasattr(tarfile, "data_filter"):
            tar.extractall(base, filter="data")
        else:
            tar.extractall(base)
    return base / "cifar-10-batches-bin"
