"""Desk-scale datasets: XOR, synthetic blobs and pairs, handwritten digits, MNIST IDX files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .errors import DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


@dataclass
class Dataset:
    """Images (or feature vectors) with integer labels."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = ""
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple:
        return self.x.shape[1:]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x.astype(dtype), self.y, self.num_classes, self.split, self.name, dict(self.normalization))

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(x, y)`` mini-batches; shuffled when ``rng`` is given.

        Batches are near-equal in size so none has a single sample unless
        the whole dataset does.
        """
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        chunks = max(1, -(-n // batch_size))
        for idx in np.array_split(order, chunks):
            yield self.x[idx], self.y[idx]


def normalize(train: Dataset, *others: Dataset) -> None:
    """Standardize every split in place with the training split's mean and std."""
    mean = float(train.x.mean())
    std = float(train.x.std()) or 1.0
    for ds in (train,) + others:
        ds.x = ((ds.x - mean) / std).astype(ds.x.dtype)
        ds.normalization = {"mean": mean, "std": std}


# -- MNIST IDX --------------------------------------------------------------------
def _open(path: PathLike):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: PathLike, magic: int, ndim: int) -> np.ndarray:
    try:
        with _open(path) as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(
    images_path: PathLike,
    labels_path: PathLike,
    split: str = "train",
    normalization: Optional[tuple[float, float]] = None,
) -> Dataset:
    """Read an IDX image/label pair into an ``N x 1 x H x W`` dataset in [0, 1].

    ``normalization=(mean, std)`` additionally standardizes the pixels.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    meta = {}
    if normalization is not None:
        mean, std = normalization
        x = (x - mean) / std
        meta = {"mean": float(mean), "std": float(std)}
    num_classes = max(10, int(labels.max()) + 1) if len(labels) else 10
    return Dataset(x.astype(np.float32), labels.astype(np.int64), num_classes, split, "mnist", meta)


def write_idx_images(path: PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DataError(f"{directory} has no {stem}[.gz]")


def load_mnist_dir(directory: PathLike) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory holding the four standard files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    train = load_mnist_idx(*(_find(directory, s) for s in MNIST_FILES["train"]), split="train")
    test = load_mnist_idx(*(_find(directory, s) for s in MNIST_FILES["test"]), split="test")
    return train, test


# -- synthetic and bundled datasets ------------------------------------------------------
def make_xor(dtype=np.float32) -> Dataset:
    x = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=dtype)
    return Dataset(x, np.array([0, 1, 1, 0]), 2, "train", "xor")


def _oriented_bumps(yy, xx, cy, cx, angle, long, short):
    c, s = np.cos(angle)[:, None, None], np.sin(angle)[:, None, None]
    dy, dx = yy[None] - cy[:, None, None], xx[None] - cx[:, None, None]
    u = dy * s + dx * c
    v = -dy * c + dx * s
    return np.exp(-(u**2) / (2 * long**2) - v**2 / (2 * short**2))


def make_blobs(
    n: int = 1000, num_classes: int = 4, size: int = 16, noise: float = 0.3, seed: int = 0, split: str = "train"
) -> Dataset:
    """One elongated Gaussian blob per image; the label is its orientation.

    The blob sits at a random position, so the class survives global pooling.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    labels = rng.integers(0, num_classes, size=n)
    cy, cx = rng.uniform(-size / 5, size / 5, size=(2, n))
    bumps = _oriented_bumps(yy, xx, cy, cx, labels * np.pi / num_classes, 2.5, 0.8)
    images = bumps + noise * rng.normal(size=bumps.shape)
    return Dataset(images[:, None].astype(np.float32), labels, num_classes, split, "blobs")


def make_pairs(
    n: int = 2000,
    num_classes: int = 8,
    size: int = 16,
    noise: float = 0.3,
    sep: float = 4.0,
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    """Two parallel elongated blobs placed side by side or one above the other.

    Orientation alone fixes the label up to a shift of ``num_classes // 2``;
    the arrangement picks which half. The same local feature therefore means
    different things depending on a global cue, which is the situation where
    per-sample kernels help.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    orient = rng.integers(0, num_classes, n)
    vertical = rng.integers(0, 2, n)
    angle = orient * np.pi / num_classes
    cy, cx = rng.uniform(-1.5, 1.5, size=(2, n))
    images = np.zeros((n, size, size))
    for sign in (-1, 1):
        images += _oriented_bumps(
            yy, xx, cy + sign * sep * (vertical == 1), cx + sign * sep * (vertical == 0), angle, 2.0, 0.8
        )
    images += noise * rng.normal(size=images.shape)
    labels = (orient + (num_classes // 2) * vertical) % num_classes
    return Dataset(images[:, None].astype(np.float32), labels, num_classes, split, "pairs")


def load_digits(upsample: int = 2, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1],
    nearest-neighbour upsampled and split into disjoint train/test sets."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    images = bunch.images.astype(np.float32) / 16.0
    if upsample > 1:
        images = images.repeat(upsample, axis=1).repeat(upsample, axis=2)
    order = np.random.default_rng(seed).permutation(len(images))
    n_test = int(round(test_fraction * len(images)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    x = images[:, None]
    return (
        Dataset(x[train_idx], bunch.target[train_idx], 10, "train", "digits"),
        Dataset(x[test_idx], bunch.target[test_idx], 10, "test", "digits"),
    )


DATASETS = ("xor", "blobs", "pairs", "digits", "mnist")


def load_dataset(name: str, path: Optional[PathLike] = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """``(train, test)`` for a dataset id; image datasets are standardized."""
    if name == "xor":
        ds = make_xor()
        return ds, Dataset(ds.x.copy(), ds.y.copy(), 2, "test", "xor")
    if name == "blobs":
        train, test = make_blobs(1000, seed=seed), make_blobs(400, seed=seed + 1, split="test")
    elif name == "pairs":
        train, test = make_pairs(2000, seed=seed), make_pairs(1000, seed=seed + 1, split="test")
    elif name == "digits":
        train, test = load_digits()
    elif name == "mnist":
        if path is None:
            raise DataError("the mnist dataset needs a directory path")
        train, test = load_mnist_dir(path)
    else:
        raise DataError(f"unknown dataset {name!r}")
    normalize(train, test)
    return train, test
