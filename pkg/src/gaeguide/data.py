"""Long-tailed datasets: exponential class profiles, IDX/CSV loading, synthetic Gaussians."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class InsufficientDataError(DataError):
    def __init__(self, deficits: dict[int, tuple[int, int]]):
        self.deficits = deficits
        detail = ", ".join(f"class {c}: need {need}, have {have}" for c, (need, have) in sorted(deficits.items()))
        super().__init__(f"not enough source examples ({detail})")


class IdxError(DataError):
    pass


class MagicMismatchError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def longtail_counts(num_classes: int, n_max: int, rho: float) -> list[int]:
    """Per-class counts n_i = round(n_max * rho ** (i / (C - 1))), rounding half up."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    if n_max < 1:
        raise ValueError("n_max must be positive")
    return [int(math.floor(n_max * rho ** (i / (num_classes - 1)) + 0.5)) for i in range(num_classes)]


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    rho: float

    def __post_init__(self):
        longtail_counts(self.num_classes, self.n_max, self.rho)  # validates

    @property
    def counts(self) -> list[int]:
        return longtail_counts(self.num_classes, self.n_max, self.rho)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows in [0, 1] with integer labels; class 0 is the head by convention."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or len(features) != len(labels):
            raise DataError(f"features {features.shape} and labels {labels.shape} disagree")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise DataError("features must lie in [0, 1]")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.num_classes)


@dataclass(frozen=True, eq=False)
class LongTailDataset(Dataset):
    spec: LongTailSpec | None = None


def build_longtail(source: Dataset, spec: LongTailSpec, seed: int) -> LongTailDataset:
    """Subsample ``source`` without replacement so class i keeps spec.counts[i] examples."""
    if spec.num_classes != source.num_classes:
        raise DataError(f"spec has {spec.num_classes} classes, source has {source.num_classes}")
    wanted = spec.counts
    have = source.counts
    deficits = {c: (n, have[c]) for c, n in enumerate(wanted) if have[c] < n}
    if deficits:
        raise InsufficientDataError(deficits)
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in enumerate(wanted):
        pool = np.flatnonzero(source.labels == c)
        keep.append(np.sort(rng.choice(pool, size=n, replace=False)))
    index = np.concatenate(keep)
    return LongTailDataset(source.features[index], source.labels[index], source.num_classes, spec)


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise MagicMismatchError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    n_bytes = math.prod(dims)
    if len(raw) - header_len < n_bytes:
        raise TruncatedFileError(f"{path}: expected {n_bytes} data bytes, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, count=n_bytes, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair (e.g. FashionMNIST); pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(features, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """CSV with header ``label,f0,f1,...``; features already in [0, 1]."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DataError(f"{path}: first column must be 'label'")
        rows = [r for r in reader if r]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    features = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(features, labels, num_classes)


def write_csv(path, dataset: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", *(f"f{i}" for i in range(dataset.dim))])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([int(y), *(repr(float(v)) for v in x)])


LAYOUTS = ("circle", "interleaved")


def circle_slots(num_classes: int, layout: str = "circle") -> np.ndarray:
    """Slot index on the circle for each class.

    ``"circle"`` puts class i in slot i, so neighbours have similar counts.
    ``"interleaved"`` walks the slots as 0, C-1, 1, C-2, ... so the rarest
    classes sit between the most frequent ones.
    """
    if layout == "circle":
        return np.arange(num_classes)
    if layout != "interleaved":
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    order = []
    lo, hi = 0, num_classes - 1
    while lo <= hi:
        order.append(lo)
        if lo != hi:
            order.append(hi)
        lo, hi = lo + 1, hi - 1
    slots = np.empty(num_classes, dtype=np.int64)
    slots[order] = np.arange(num_classes)
    return slots


def circle_means(num_classes: int, radius: float = 0.3, center=(0.5, 0.5), layout: str = "circle") -> np.ndarray:
    angles = 2 * np.pi * circle_slots(num_classes, layout) / num_classes
    return np.stack([center[0] + radius * np.cos(angles), center[1] + radius * np.sin(angles)], axis=1)


def synth_gaussians(
    spec: LongTailSpec,
    seed: int,
    means=None,
    covariances=None,
    sigma: float = 0.08,
    layout: str = "circle",
) -> LongTailDataset:
    """Gaussian mixture with spec.counts[i] draws for class i, clipped to the unit square.

    Without explicit ``means`` the class centres sit on a circle of radius 0.3
    around (0.5, 0.5) with isotropic standard deviation ``sigma``; ``layout``
    decides which class takes which position (see :func:`circle_slots`).
    """
    C = spec.num_classes
    means = circle_means(C, layout=layout) if means is None else np.asarray(means, dtype=np.float64)
    if means.shape[0] != C:
        raise ValueError(f"need {C} means, got {means.shape[0]}")
    dim = means.shape[1]
    if covariances is None:
        covariances = np.broadcast_to(np.eye(dim) * sigma**2, (C, dim, dim))
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, n in enumerate(spec.counts):
        xs.append(rng.multivariate_normal(means[c], covariances[c], size=n))
        ys.append(np.full(n, c))
    features = np.clip(np.concatenate(xs), 0.0, 1.0)
    return LongTailDataset(features, np.concatenate(ys), C, spec)


def stratified_split(
    dataset: Dataset,
    test_fraction: float | None = None,
    seed: int = 0,
    test_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Hold out a class-balanced test set.

    The per-class test count is ``floor(test_fraction * smallest class)`` unless
    ``test_per_class`` fixes it directly.
    """
    counts = dataset.counts
    if min(counts) < 2:
        raise DataError(f"every class needs at least 2 examples, counts are {counts}")
    if test_per_class is None:
        if test_fraction is None or not 0 <= test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")
        test_per_class = int(math.floor(test_fraction * min(counts)))
    if test_per_class >= min(counts):
        raise DataError(f"test_per_class={test_per_class} leaves no training data for the smallest class")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(dataset.num_classes):
        pool = np.flatnonzero(dataset.labels == c)
        test_idx.append(np.sort(rng.choice(pool, size=test_per_class, replace=False)))
    test_idx = np.concatenate(test_idx).astype(np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[test_idx] = False
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(test_idx)
