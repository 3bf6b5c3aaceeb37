"""In-distribution generators, noise OOD sets, splits and the text dataset format."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class Origin(str, enum.Enum):
    IN_DISTRIBUTION = "in_distribution"
    OOD = "ood"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class Dataset:
    """A labelled set of flat real vectors.

    Stored column-wise (``x`` is ``(n, d)``, ``y`` is ``(n,)``) since every
    consumer works on batches; ``samples()`` yields the row view.
    """

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    origin: Origin = Origin.IN_DISTRIBUTION

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("dataset must be a nonempty (n, d) array")
        if y.shape != (x.shape[0],):
            raise ValueError(f"label shape {y.shape} does not match n={x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("dataset contains non-finite inputs")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "origin", Origin(self.origin))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def samples(self) -> Iterator[LabeledSample]:
        for xi, yi in zip(self.x, self.y):
            yield LabeledSample(xi, int(yi))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.origin)

    def with_labels(self, y) -> "Dataset":
        return Dataset(self.x, np.asarray(y), self.num_classes, self.origin)

    def with_origin(self, origin) -> "Dataset":
        return Dataset(self.x, self.y, self.num_classes, Origin(origin))


def cluster_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class means on a regular polygon in the first two coordinates.

    Neighbouring vertices sit exactly ``separation`` apart; the polygon is
    centred at the origin, so every mean is at least ``separation / 2`` away
    from it. For ``dim == 1`` the means are spaced along the line instead.
    """
    if dim == 1:
        offsets = np.arange(num_classes) - (num_classes - 1) / 2.0
        return (offsets * separation + separation * num_classes)[:, None]
    radius = separation / (2.0 * math.sin(math.pi / num_classes))
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes + math.pi / 2
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_synthetic_id(
    num_classes: int,
    dim: int,
    n: int,
    separation: float,
    seed: int,
    std: float = 1.0,
) -> Dataset:
    """Class-conditional isotropic Gaussian mixture with balanced classes."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n < num_classes:
        raise ValueError("n must be >= num_classes")
    if not separation > 0:
        raise ValueError("separation must be positive")
    if not std > 0:
        raise ValueError("std must be positive")
    rng = np.random.default_rng(seed)
    means = cluster_means(num_classes, dim, separation)
    y = np.arange(n) % num_classes
    y = y[rng.permutation(n)]
    x = means[y] + std * rng.standard_normal((n, dim))
    return Dataset(x, y, num_classes, Origin.IN_DISTRIBUTION)


def make_shifted_ood(
    num_classes: int,
    dim: int,
    n: int,
    separation: float,
    seed: int,
    std: float = 1.0,
) -> Dataset:
    """A single Gaussian cluster centred where no ID class lives.

    The centre sits outside the ID polygon, halfway (in angle) between the
    first two class means at 1.5x their radius. Labels are placeholders (0);
    the harness replaces them with classifier predictions before scoring.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    means = cluster_means(num_classes, dim, separation)
    if dim == 1:
        centre = means.max(axis=0) + 2 * separation
    else:
        radius = separation / (2.0 * math.sin(math.pi / num_classes))
        angle = math.pi / 2 + math.pi / num_classes
        centre = np.zeros(dim)
        centre[0] = 1.5 * radius * math.cos(angle)
        centre[1] = 1.5 * radius * math.sin(angle)
    x = centre + std * rng.standard_normal((n, dim))
    return Dataset(x, np.zeros(n, dtype=np.int64), num_classes, Origin.OOD)


def make_noise_ood(kind: str, n: int, dim: int, seed: int, num_classes: int = 2) -> Dataset:
    """i.i.d. U[0, 1] or N(0.5, 1) noise in every coordinate."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "uniform":
        x = rng.uniform(0.0, 1.0, size=(n, dim))
    elif kind == "gaussian":
        x = 0.5 + rng.standard_normal((n, dim))
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return Dataset(x, np.zeros(n, dtype=np.int64), num_classes, Origin.OOD)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    short = n - sum(sizes)
    # ties go to the earlier part
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    if not fractions or any(not f > 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)!r}, expected 1")
    sizes = _largest_remainder(len(dataset), fractions)
    if any(s == 0 for s in sizes):
        raise ValueError(f"split sizes {sizes} would leave an empty part")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    bounds = np.cumsum([0] + sizes)
    return [dataset.subset(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def load_digits_dataset() -> Dataset:
    """The 8x8 handwritten-digit set bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10, Origin.IN_DISTRIBUTION)


# -- text format --------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    """Header ``d=<d> C=<C> n=<n> origin=<tag>`` then one ``y x_1 .. x_d`` line per sample."""
    path = Path(path)
    lines = [f"d={dataset.dim} C={dataset.num_classes} n={len(dataset)} origin={dataset.origin.value}"]
    for xi, yi in zip(dataset.x, dataset.y):
        lines.append(f"{int(yi)} " + " ".join(f"{v:.9g}" for v in xi))
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty dataset file")
    header = {}
    for tok in text[0].split():
        key, _, val = tok.partition("=")
        header[key] = val
    try:
        d, c, n = int(header["d"]), int(header["C"]), int(header["n"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed header {text[0]!r}") from exc
    origin = header.get("origin", Origin.IN_DISTRIBUTION.value)
    rows = [ln for ln in text[1:] if ln.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: header says n={n} but found {len(rows)} rows")
    x = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != d + 1:
            raise ValueError(f"{path}: row {i + 1} has {len(parts) - 1} values, expected {d}")
        y[i] = int(parts[0])
        x[i] = [float(v) for v in parts[1:]]
    return Dataset(x, y, c, origin)
