"""Dataset handling: IDX files, synthetic blobs, and client partitioning."""

import gzip
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .rng import stream

__all__ = [
    "Dataset",
    "PartitionSpec",
    "load_idx",
    "write_idx",
    "make_synthetic",
    "dirichlet_partition",
    "subsample",
    "unit_normalize",
    "one_hot",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Flat float64 inputs plus integer class labels in [0, n_classes)."""

    X: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or labels.ndim != 1 or X.shape[0] != labels.shape[0]:
            raise ValueError("X must be (N, d1) with one label per row")
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    """Client -> sample-index lists; lists are disjoint by construction."""

    assignment: tuple[np.ndarray, ...]

    def __post_init__(self):
        ass = tuple(np.asarray(a, dtype=np.int64) for a in self.assignment)
        seen = np.concatenate(ass) if ass else np.empty(0, dtype=np.int64)
        if seen.size != np.unique(seen).size:
            raise ValueError("client index lists must be disjoint")
        object.__setattr__(self, "assignment", ass)

    @property
    def n_clients(self) -> int:
        return len(self.assignment)

    def sizes(self) -> list[int]:
        return [int(a.size) for a in self.assignment]


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"truncated IDX file: expected {count} bytes for {what}, got {len(data)}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (big-endian, optionally gzipped).

    Pixels are scaled to [0, 1] by dividing by 255; each image becomes one
    row-major flattened row of X.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise ValueError(f"bad image magic number 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, "pixels"), dtype=np.uint8)
        if fh.read(1):
            raise ValueError("trailing bytes after IDX image payload")
    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise ValueError(f"bad label magic number 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count, "labels"), dtype=np.uint8)
        if fh.read(1):
            raise ValueError("trailing bytes after IDX label payload")
    if count != label_count:
        raise ValueError(f"image/label count mismatch: {count} images vs {label_count} labels")
    X = pixels.astype(np.float64).reshape(count, rows * cols) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(X, labels, int(labels.max()) + 1 if labels.size else 1)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images of shape (N, rows, cols) and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError("expected images (N, rows, cols) and labels (N,)")
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, n))
        fh.write(labels.tobytes())


def make_synthetic(n_samples: int, d1: int, n_classes: int, seed,
                   center_scale: float = 3.0, spread: float = 0.6) -> Dataset:
    """Class-conditional Gaussian blobs with every class represented.

    Class centres are drawn on a sphere of radius ``center_scale`` and
    samples scattered isotropically with standard deviation ``spread``.
    """
    if n_samples < n_classes:
        raise ValueError(f"need at least one sample per class: N={n_samples} < C={n_classes}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, d1))
    centers *= center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    counts = np.full(n_classes, n_samples // n_classes, dtype=np.int64)
    counts[: n_samples % n_classes] += 1
    X = np.empty((n_samples, d1), dtype=np.float64)
    labels = np.empty(n_samples, dtype=np.int64)
    pos = 0
    for c in range(n_classes):
        k = int(counts[c])
        X[pos:pos + k] = centers[c] + spread * rng.standard_normal((k, d1))
        labels[pos:pos + k] = c
        pos += k
    perm = rng.permutation(n_samples)
    return Dataset(X[perm], labels[perm], n_classes)


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, seed) -> PartitionSpec:
    """Label-skewed partition: client m's class mix follows q_m ~ Dir(alpha).

    Each client receives an equal share of the dataset (N // M, remainders to
    the first clients); its per-class demand is the largest-remainder
    apportionment of that share by q_m.  Demands beyond an exhausted class
    pool spill to the most abundant remaining class, so every sample is
    assigned exactly once.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    n, c = len(ds), ds.n_classes
    pools = [rng.permutation(np.flatnonzero(ds.labels == k)).astype(np.int64) for k in range(c)]
    cursor = np.zeros(c, dtype=np.int64)
    remaining = np.array([p.size for p in pools], dtype=np.int64)
    quotas = np.full(n_clients, n // n_clients, dtype=np.int64)
    quotas[: n % n_clients] += 1
    assignment = []
    for m in range(n_clients):
        q = rng.dirichlet(np.full(c, alpha))
        quota = int(quotas[m])
        raw = q * quota
        target = np.floor(raw).astype(np.int64)
        short = quota - int(target.sum())
        if short > 0:
            # largest fractional parts first, ties to the lower class index
            order = np.lexsort((np.arange(c), -(raw - target)))
            target[order[:short]] += 1
        picks = []
        need = 0
        for k in range(c):
            take = min(int(target[k]), int(remaining[k]))
            if take:
                picks.append(pools[k][cursor[k]:cursor[k] + take])
                cursor[k] += take
                remaining[k] -= take
            need += int(target[k]) - take
        while need > 0 and remaining.sum() > 0:
            k = int(np.argmax(remaining))
            take = min(need, int(remaining[k]))
            picks.append(pools[k][cursor[k]:cursor[k] + take])
            cursor[k] += take
            remaining[k] -= take
            need -= take
        assignment.append(np.sort(np.concatenate(picks)) if picks else np.empty(0, dtype=np.int64))
    return PartitionSpec(tuple(assignment))


def subsample(part: PartitionSpec, beta: float, seed) -> PartitionSpec:
    """Keep a uniform random max(1, floor(beta * N_m)) subset per client."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if beta == 1.0:
        return part
    frac = Fraction(str(beta))
    out = []
    for m, idx in enumerate(part.assignment):
        keep = max(1, int(frac * idx.size))
        rng = stream(seed, "subsample", m)
        chosen = np.sort(rng.permutation(idx.size)[:keep])
        out.append(idx[chosen])
    return PartitionSpec(tuple(out))


def unit_normalize(ds: Dataset) -> Dataset:
    """Scale every input row to unit Euclidean norm."""
    norms = np.linalg.norm(ds.X, axis=1)
    if (norms == 0.0).any():
        raise ValueError("cannot normalize: dataset contains an all-zero row")
    return Dataset(ds.X / norms[:, None], ds.labels, ds.n_classes)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out
