"""CIFAR-10 binary I/O and deterministic synthetic classification tasks."""

from __future__ import annotations

import os
from functools import lru_cache
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from .embedding import normalize as standardize
from .errors import FormatError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W)
    label: int


# ----------------------------------------------------------------- CIFAR-10


def _cifar_records(raw: bytes, path) -> np.ndarray:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(recs[:, 0] >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} has label {recs[bad[0], 0]} >= {CIFAR_CLASSES}")
    return recs


def load_cifar10_arrays(path: str | os.PathLike, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Whole batch file as ``(images (N,3,32,32), labels (N,))``."""
    with open(path, "rb") as fh:
        recs = _cifar_records(fh.read(), path)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if normalize:
        images = standardize(images)
    return images, recs[:, 0].astype(np.int64)


def load_cifar10(path: str | os.PathLike, normalize: bool = True) -> Iterator[Sample]:
    """Yield samples in file order.

    Each record is one label byte followed by 3072 pixel bytes (R, G, B
    planes of 32x32, row-major).  The file is validated before anything is
    yielded.
    """
    images, labels = load_cifar10_arrays(path, normalize)
    for img, lab in zip(images, labels):
        yield Sample(img, int(lab))


def write_cifar10(samples: Iterable[Sample], path: str | os.PathLike) -> None:
    """Inverse of ``load_cifar10(normalize=False)`` for [0, 1] pixel images."""
    with open(path, "wb") as fh:
        for s in samples:
            if not 0 <= s.label < CIFAR_CLASSES:
                raise FormatError(f"label {s.label} out of range")
            px = np.clip(np.rint(np.asarray(s.image) * 255.0), 0, 255).astype(np.uint8)
            fh.write(bytes([s.label]) + px.reshape(-1).tobytes())


# ------------------------------------------------------------ synthetic data


class TaskMode(str, Enum):
    LOCAL_PATCH = "local_patch"
    GLOBAL_MAJORITY = "global_majority"


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """A procedurally generated task; sample ``i`` is a pure function of (spec, i).

    ``local_patch``: the class pattern sits in the top-left ``region`` x
    ``region`` square; the rest of the image is uniform noise.

    ``global_majority``: the image is a grid of ``cell`` x ``cell`` cells,
    each showing one class pattern with a random sign.  The label's pattern
    fills a ``coverage`` fraction (> 1/2) of the cells and the remaining
    cells show other classes.  Because of the sign flips, image-wide
    averages carry no class information; each cell has to be recognised
    on its own.
    """

    image_size: int = 8
    num_classes: int = 10
    seed: int = 0
    mode: TaskMode = TaskMode.LOCAL_PATCH
    region: int = 4
    cell: int = 2
    coverage: tuple[float, float] = (0.55, 0.75)
    amplitude: float = 0.35
    noise: float | None = None  # None: 0.05 for local_patch, 0.3 for global_majority

    def __post_init__(self):
        object.__setattr__(self, "mode", TaskMode(self.mode))
        if self.noise is None:
            object.__setattr__(self, "noise", 0.05 if self.mode is TaskMode.LOCAL_PATCH else 0.3)
        if self.mode is TaskMode.GLOBAL_MAJORITY and self.image_size % self.cell:
            raise ValueError("image size must be a multiple of the cell size")
        if self.region > self.image_size:
            raise ValueError("region larger than the image")
        lo, hi = self.coverage
        if not 0.5 < lo <= hi <= 1.0:
            raise ValueError("coverage must lie in (0.5, 1]")


@lru_cache(maxsize=32)
def _templates(spec: SyntheticTaskSpec) -> np.ndarray:
    side = spec.region if spec.mode is TaskMode.LOCAL_PATCH else spec.cell
    rng = np.random.default_rng([spec.seed, 0x7E4])
    return rng.choice([-1.0, 1.0], size=(spec.num_classes, 3, side, side))


def synthetic_label(spec: SyntheticTaskSpec, index: int) -> int:
    """Labels are a fresh random permutation of the classes in every block of
    ``num_classes`` consecutive indices, so any window is near-balanced."""
    block, offset = divmod(index, spec.num_classes)
    perm = np.random.default_rng([spec.seed, 0x1AB, block]).permutation(spec.num_classes)
    return int(perm[offset])


def gen_synthetic(spec: SyntheticTaskSpec, index: int, normalize: bool = False) -> Sample:
    if index < 0:
        raise ValueError("index must be non-negative")
    tmpl = _templates(spec)
    label = synthetic_label(spec, index)
    rng = np.random.default_rng([spec.seed, 0x5A, index])
    s = spec.image_size

    if spec.mode is TaskMode.LOCAL_PATCH:
        img = rng.random((3, s, s))
        r = spec.region
        img[:, :r, :r] = 0.5 + spec.amplitude * tmpl[label] + spec.noise * rng.standard_normal((3, r, r))
    else:
        g = s // spec.cell
        n = g * g
        lo, hi = spec.coverage
        n_major = int(np.clip(rng.integers(int(np.ceil(lo * n)), int(np.floor(hi * n)) + 1), n // 2 + 1, n))
        others = [c for c in range(spec.num_classes) if c != label]
        cls = np.concatenate([np.full(n_major, label), rng.choice(others, size=n - n_major)])
        cls = cls[rng.permutation(n)]
        signs = rng.choice([-1.0, 1.0], size=n)
        cells = signs[:, None, None, None] * tmpl[cls]                  # (n, 3, cell, cell)
        img = cells.reshape(g, g, 3, spec.cell, spec.cell).transpose(2, 0, 3, 1, 4).reshape(3, s, s)
        img = 0.5 + spec.amplitude * img + spec.noise * rng.standard_normal((3, s, s))

    img = np.clip(img, 0.0, 1.0)
    return Sample(standardize(img) if normalize else img, label)


class SyntheticDataset:
    """Indices ``[start, start + size)`` of a synthetic task, materialised."""

    def __init__(self, spec: SyntheticTaskSpec, size: int, start: int = 0, normalize: bool = True):
        self.spec = spec
        samples = [gen_synthetic(spec, start + i, normalize=normalize) for i in range(size)]
        self.images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 3, spec.image_size, spec.image_size))
        self.labels = np.array([s.label for s in samples], dtype=np.int64)
        self.num_classes = spec.num_classes

    def __len__(self) -> int:
        return len(self.labels)


class ArrayDataset:
    """Pre-built ``images``/``labels`` arrays (e.g. from CIFAR-10)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int):
        self.images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = num_classes

    def __len__(self) -> int:
        return len(self.labels)
