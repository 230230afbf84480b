"""Datasets: seeded two-moons and IDX (MNIST-family) files."""

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    X: np.ndarray  # float32, (N, *input_shape), values in [0, 1]
    y: np.ndarray  # int64, (N,)

    def __len__(self):
        return len(self.y)

    def subset(self, n):
        return Dataset(self.X[:n], self.y[:n])


@dataclass
class Split:
    train: Dataset
    test: Dataset


def gen_two_moons(n, noise=0.1, seed=0, test_fraction=0.2):
    """Two interleaved half-circles with Gaussian noise, mapped into [0.1, 0.9]^2.

    The map is per-axis affine onto the sample's bounding box, so noiseless
    points stay exactly on the (mapped) arcs.  80/20 train/test split by a
    seeded shuffle.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    X, y = make_moons(n_samples=n, noise=noise if noise > 0 else None, random_state=seed, shuffle=False)
    lo, hi = X.min(axis=0), X.max(axis=0)
    X = 0.1 + 0.8 * (X - lo) / np.where(hi > lo, hi - lo, 1.0)
    X = np.clip(X, 0.1, 0.9).astype(np.float32)
    order = np.random.default_rng(seed).permutation(n)
    X, y = X[order], y[order].astype(np.int64)
    n_test = int(round(test_fraction * n))
    return Split(Dataset(X[n_test:], y[n_test:]), Dataset(X[:n_test], y[:n_test]))


class IdxError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.offset = offset


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxError(path, len(raw), "file too short for magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxError(path, 0, f"magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(path, len(raw), f"header truncated, need {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxError(path, len(raw), f"payload truncated: {len(raw) - header} of {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, subset=None):
    """Images (N, 1, H, W) scaled to [0, 1] and int labels; first ``subset`` items."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(labels_path, 4, f"label count {labels.shape[0]} != image count {images.shape[0]}")
    if subset is not None:
        images, labels = images[:subset], labels[:subset]
    X = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(X, labels.astype(np.int64))


def write_idx(path, array, magic):
    """Write a uint8 array in IDX format (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())
