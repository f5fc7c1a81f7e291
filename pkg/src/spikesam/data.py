"""Labeled image sets: a seeded synthetic-shapes generator and a netpbm directory loader."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netpbm import read_netpbm

SHAPES = ("square", "disk", "triangle", "cross", "ring", "bar", "diamond", "x")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W], float64 in [0, 255]
    labels: np.ndarray  # [N], int64
    names: list[str]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.names[i] for i in idx], self.class_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    thick = max(1.5, r / 3)
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "triangle":
        # upright isosceles triangle inscribed in the radius-r box
        top, base = cy - r, cy + r * 0.8
        half = (yy - top) / (base - top) * r
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= half)
    if kind == "cross":
        return ((np.abs(dy) <= thick / 2) & (np.abs(dx) <= r)) | ((np.abs(dx) <= thick / 2) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r - thick)
    if kind == "bar":
        return (np.abs(dy) <= thick / 2) & (np.abs(dx) <= r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "x":
        return ((np.abs(dy - dx) <= thick / 1.4) | (np.abs(dy + dx) <= thick / 1.4)) & (np.abs(dx) <= r * 0.8)
    raise ValueError(f"unknown shape {kind!r}")


def synthetic_shapes(num_classes: int = 4, size: int = 32, count: int = 2400, seed: int = 0,
                     channels: int = 1, noise: float = 30.0) -> Dataset:
    """Bright shapes on a dim noisy background, one shape class per label.

    Position, radius and brightness are random; labels cycle so classes are
    balanced. Same arguments give an identical dataset.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
    if size < 12:
        raise ValueError("size must be at least 12 pixels")
    rng = np.random.default_rng(seed)
    images = np.empty((count, channels, size, size))
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    for n in range(count):
        r = rng.uniform(0.18, 0.3) * size
        cy, cx = rng.uniform(r + 1, size - r - 1, 2)
        m = _shape_mask(SHAPES[labels[n]], size, cy, cx, r, rng)
        bright = rng.uniform(170, 255)
        bg = rng.uniform(0, noise, (channels, size, size))
        tint = rng.uniform(0.8, 1.0, (channels, 1, 1)) if channels > 1 else 1.0
        images[n] = np.where(m, bright * tint, bg)
    names = [f"synthetic_{seed}_{n:05d}" for n in range(count)]
    return Dataset(images, labels.astype(np.int64), names, list(SHAPES[:num_classes]))


def load_dataset(path: str | Path) -> Dataset:
    """Load ``labels.txt`` (``<file> <label>`` per line) and the netpbm files it names.

    Rows are ordered by file name. Class names are the sorted distinct labels.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    index = path / "labels.txt"
    if not index.exists():
        files = list(path.iterdir())
        raise FileNotFoundError(f"{path}: no labels.txt" + (" (directory is empty)" if not files else ""))
    entries = []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{index}:{lineno}: expected '<file> <label>', got {line!r}")
        name, label = parts
        if not (path / name).is_file():
            raise FileNotFoundError(f"{index}:{lineno}: unknown image {name!r}")
        entries.append((name, label))
    if not entries:
        raise ValueError(f"{path}: labels.txt lists no images")
    entries.sort()
    class_names = sorted({lab for _, lab in entries})
    lookup = {c: i for i, c in enumerate(class_names)}
    images = [read_netpbm(path / name)[0] for name, _ in entries]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{path}: images have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.array([lookup[l] for _, l in entries], dtype=np.int64),
                   [n for n, _ in entries], class_names)


def split(dataset: Dataset, test_fraction: float = 1 / 6, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Fixed train/test split: an item is test iff its seeded name hash falls below the fraction."""
    test = []
    for i, name in enumerate(dataset.names):
        h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
        test.append(int.from_bytes(h[:8], "big") / 2 ** 64 < test_fraction)
    test = np.array(test)
    return dataset.subset(np.flatnonzero(~test)), dataset.subset(np.flatnonzero(test))


def take_split(dataset: Dataset, n_train: int, n_test: int) -> tuple[Dataset, Dataset]:
    """First ``n_train`` items for training, next ``n_test`` for testing."""
    if n_train + n_test > len(dataset):
        raise ValueError(f"need {n_train + n_test} items, dataset has {len(dataset)}")
    return dataset.subset(np.arange(n_train)), dataset.subset(np.arange(n_train, n_train + n_test))
