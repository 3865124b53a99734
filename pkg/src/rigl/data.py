"""MNIST (IDX) and CIFAR-10 (binary) readers and deterministic batch streams.

The data root defaults to ``$RIGL_DATA_ROOT`` (else ``./data``); MNIST is
read from ``<root>/mnist`` and CIFAR-10 from ``<root>/cifar-10-batches-bin``.
"""
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073
# per-channel statistics of the CIFAR-10 training split
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class FormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) float64
    labels: np.ndarray  # (count,) int64
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def data_root():
    return Path(os.environ.get("RIGL_DATA_ROOT", "data"))


def _read_bytes(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return path, raw


def read_idx(path, expected_magic):
    """Parse an IDX file into a uint8 array of its declared shape."""
    path, raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(path, len(raw), "truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, len(raw), "truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(path, len(raw), f"truncated data: need {header + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(path=None, split="train"):
    """Images scaled to [0, 1] as ``(count, 28, 28, 1)``."""
    root = Path(path) if path is not None else data_root() / "mnist"
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(root / img_name, IDX_IMAGES)
    labels = read_idx(root / lbl_name, IDX_LABELS).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(root / lbl_name, 4, f"{len(labels)} labels for {len(images)} images")
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(root / lbl_name, 8 + int(bad[0]), f"label {labels[bad[0]]} out of range")
    x = images.astype(np.float64)[..., None] / 255.0
    return Dataset(x, labels, split)


def load_cifar10(path=None, split="train"):
    """Images as ``(count, 32, 32, 3)``, per-channel standardized."""
    root = Path(path) if path is not None else data_root() / "cifar-10-batches-bin"
    xs, ys = [], []
    for name in CIFAR_FILES[split]:
        fpath, raw = _read_bytes(root / name)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(fpath, len(raw) - len(raw) % CIFAR_RECORD,
                              f"size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0].astype(np.int64)
        bad = np.flatnonzero(labels > 9)
        if bad.size:
            raise FormatError(fpath, int(bad[0]) * CIFAR_RECORD, f"label {labels[bad[0]]} out of range")
        # planar R, G, B rows -> HWC
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(labels)
    x = np.concatenate(xs).astype(np.float64) / 255.0
    x = (x - CIFAR_MEAN) / CIFAR_STD
    return Dataset(x, np.concatenate(ys), split)


def load_dataset(name, split, path=None):
    if name == "mnist":
        return load_mnist(path, split)
    if name == "cifar10":
        return load_cifar10(path, split)
    raise ValueError(f"unknown dataset {name!r}")


def epoch_permutation(n, seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_stream(dataset, batch_size, seed, epoch):
    """Batches of one shuffled epoch; the ragged tail is dropped."""
    if batch_size > len(dataset):
        raise ValueError("batch_size exceeds dataset size")
    perm = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(dataset) - batch_size + 1, batch_size):
        idx = perm[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def augment(images, rng, pad=4):
    """Random horizontal flip and ``pad``-pixel pad-and-crop, per image."""
    n, h, w, _ = images.shape
    flip = rng.random(n) < 0.5
    out = np.where(flip[:, None, None, None], images[:, :, ::-1, :], images)
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    return np.stack([padded[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


class BatchStream:
    """Step-indexed access to the sequence produced by :func:`batch_stream`.

    ``batch(t)`` depends only on ``(seed, t)``, so a resumed run sees the
    same data as an uninterrupted one.
    """

    def __init__(self, dataset, batch_size, seed, augment_data=False):
        if batch_size > len(dataset):
            raise ValueError("batch_size exceeds dataset size")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = int(seed)
        self.augment_data = augment_data
        self.per_epoch = len(dataset) // batch_size
        self._epoch = None
        self._perm = None

    def indices(self, t):
        epoch, pos = divmod(int(t), self.per_epoch)
        if epoch != self._epoch:
            self._perm = epoch_permutation(len(self.dataset), self.seed, epoch)
            self._epoch = epoch
        return self._perm[pos * self.batch_size:(pos + 1) * self.batch_size]

    def batch(self, t):
        idx = self.indices(t)
        x = self.dataset.images[idx]
        if self.augment_data:
            x = augment(x, np.random.default_rng([self.seed, int(t), 1]))
        return x, self.dataset.labels[idx]
