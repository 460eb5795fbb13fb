"""Desk-scale datasets: two moons, Gaussian blobs and IDX (MNIST-format) files."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Dataset:
    """Standardized train/test splits plus an optional OOD feature set.

    ``mean``/``std`` are computed on the raw train split only and applied to
    every split.
    """

    train: Split
    test: Split
    ood: np.ndarray | None
    num_classes: int
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return self.train.x.shape[1]

    @classmethod
    def from_raw(cls, train: Split, test: Split, ood: np.ndarray | None, num_classes: int) -> Dataset:
        mean = train.x.mean(axis=0)
        std = train.x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)

        def z(a):
            return (a - mean) / std

        return cls(
            Split(z(train.x), train.y.astype(np.int64)),
            Split(z(test.x), test.y.astype(np.int64)),
            None if ood is None else z(ood),
            num_classes,
            mean,
            std,
        )

    def unstandardize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def two_moons_points(n: int, noise_std: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Raw two-moons sample with ``ceil(n/2)`` points in class 0."""
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.concatenate([upper, lower])
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, x.shape)
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    order = rng.permutation(n)
    return x[order], y[order]


def ring_points(n: int, center: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return center + radius * np.column_stack([np.cos(theta), np.sin(theta)])


def gen_two_moons(
    n: int,
    noise_std: float,
    seed: int,
    n_test: int | None = None,
    n_ood: int | None = None,
    ood_radius_factor: float = 3.0,
) -> Dataset:
    """Two interleaved half circles; OOD points lie on a ring around the data
    at ``ood_radius_factor`` times its radius."""
    if n < 4:
        raise ValueError("two moons needs n >= 4")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    n_test = n // 2 if n_test is None else n_test
    n_ood = n_test if n_ood is None else n_ood
    rng = np.random.default_rng(seed)
    xtr, ytr = two_moons_points(n, noise_std, rng)
    xte, yte = two_moons_points(n_test, noise_std, rng)
    center = xtr.mean(axis=0)
    radius = np.max(np.linalg.norm(xtr - center, axis=1))
    ood = ring_points(n_ood, center, ood_radius_factor * radius, rng)
    return Dataset.from_raw(Split(xtr, ytr), Split(xte, yte), ood, 2)


def gen_blobs(k: int, n: int, spread: float, seed: int, n_test: int | None = None, dim: int = 2) -> Dataset:
    """``k`` isotropic Gaussian blobs on a circle of radius 4; the OOD set is
    a (k+1)-th blob placed at radius 12."""
    if k < 2:
        raise ValueError("need at least two blobs")
    if n < 4:
        raise ValueError("blobs needs n >= 4")
    n_test = n // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(k + 1) / (k + 1)
    centers = np.zeros((k + 1, dim))
    centers[:, 0] = 4.0 * np.cos(angles)
    centers[:, 1] = 4.0 * np.sin(angles)
    centers[k] *= 3.0

    def sample(m):
        y = np.arange(m) % k
        rng.shuffle(y)
        return centers[y] + rng.normal(0.0, spread, (m, dim)), y

    xtr, ytr = sample(n)
    xte, yte = sample(n_test)
    ood = centers[k] + rng.normal(0.0, spread, (n_test, dim))
    return Dataset.from_raw(Split(xtr, ytr), Split(xte, yte), ood, k)


# -- IDX ------------------------------------------------------------------


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: missing magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    size = int(np.prod(dims))
    if len(raw) < head + size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - head}")
    if len(raw) > head + size:
        raise IdxFormatError(f"{path}: {len(raw) - head - size} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path) -> Split:
    """One split from an IDX image/label pair; pixels scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Split(x, labels.astype(np.int64))


def idx_dataset(train: Split, test: Split, num_classes: int | None = None) -> Dataset:
    if num_classes is None:
        num_classes = int(max(train.y.max(), test.y.max())) + 1
    return Dataset.from_raw(train, test, None, num_classes)


def write_digits_idx(directory, n_train: int, n_test: int, seed: int) -> dict[str, Path]:
    """Write an MNIST-format fixture built from scikit-learn's bundled 8x8
    digits: each image is upsampled to 24x24, placed on a 28x28 canvas at a
    random offset and lightly noised."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def render(m):
        idx = rng.integers(0, len(digits.target), m)
        out = np.zeros((m, 28, 28))
        for row, i in enumerate(idx):
            big = np.kron(digits.images[i] / 16.0, np.ones((3, 3)))
            dy, dx = rng.integers(0, 5, 2)
            out[row, dy:dy + 24, dx:dx + 24] = big
        out = np.clip(out + rng.normal(0.0, 0.05, out.shape) * (out > 0), 0.0, 1.0)
        return np.round(out * 255).astype(np.uint8), digits.target[idx].astype(np.uint8)

    paths = {}
    for split, m in (("train", n_train), ("test", n_test)):
        images, labels = render(m)
        paths[f"{split}_images"] = directory / f"{split}-images-idx3-ubyte"
        paths[f"{split}_labels"] = directory / f"{split}-labels-idx1-ubyte"
        write_idx(paths[f"{split}_images"], images)
        write_idx(paths[f"{split}_labels"], labels)
    return paths


def holdout_ood(dataset: Dataset, held_classes) -> Dataset:
    """Drop ``held_classes`` from train/test, relabel the rest compactly
    (order preserving) and use the held-out test samples as the OOD set."""
    held = sorted(set(int(c) for c in held_classes))
    if not held:
        raise ValueError("held_classes must be nonempty")
    kept = [c for c in range(dataset.num_classes) if c not in held]
    if not kept or any(c < 0 or c >= dataset.num_classes for c in held):
        raise ValueError("held_classes must be a proper subset of the classes")
    relabel = np.full(dataset.num_classes, -1, np.int64)
    relabel[kept] = np.arange(len(kept))

    def keep(split: Split) -> Split:
        mask = relabel[split.y] >= 0
        return Split(split.x[mask], relabel[split.y[mask]])

    ood = dataset.test.x[relabel[dataset.test.y] < 0]
    return replace(dataset, train=keep(dataset.train), test=keep(dataset.test), ood=ood,
                   num_classes=len(kept))


def export_csv(dataset: Dataset, path) -> None:
    """Write every split as rows ``split,label,x0..x{d-1}`` (OOD label -1)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "label"] + [f"x{i}" for i in range(dataset.dim)])
        for name, split in (("train", dataset.train), ("test", dataset.test)):
            for x, y in zip(split.x, split.y):
                w.writerow([name, int(y)] + [repr(float(v)) for v in x])
        if dataset.ood is not None:
            for x in dataset.ood:
                w.writerow(["ood", -1] + [repr(float(v)) for v in x])
