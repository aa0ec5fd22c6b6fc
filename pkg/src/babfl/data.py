"""Datasets and heterogeneous client partitioning."""
from __future__ import annotations

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_REDRAWS = 100
BLOB_BOX = 10.0


class DataError(ValueError):
    """Invalid dataset or partition arguments."""


class IdxFormatError(DataError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray  # (n, d), scaled to [0, 1]
    labels: np.ndarray  # (n,) ints in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64, copy=False).ravel()
        if x.ndim != 2 or x.shape[0] != y.size:
            raise DataError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(x)):
            raise DataError("features must be finite")
        if self.n_classes < 1 or (y.size and (y.min() < 0 or y.max() >= self.n_classes)):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# -- IDX files -------------------------------------------------------------------------------


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(path, raw: bytes, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxFormatError(path, 0, "file too short for the magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise IdxFormatError(path, len(raw), f"truncated payload, expected {need} bytes")
    if len(raw) > need:
        raise IdxFormatError(path, need, f"{len(raw) - need} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped) into a flattened dataset."""
    images = _parse_idx(images_path, _read(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, _read(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    c = n_classes if n_classes is not None else (int(y.max()) + 1 if y.size else 1)
    return LabeledDataset(features, y, c)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# -- synthetic data --------------------------------------------------------------------------


def synth_blobs(n_classes: int, n_per_class: int, dim: int, spread: float, seed) -> LabeledDataset:
    """Isotropic Gaussian blobs with centers at least ``4 * spread`` apart, min-max scaled.

    Centers are drawn uniformly in a cube of side ``BLOB_BOX`` (grown only when the
    separation constraint cannot be met), so ``spread`` sets the class overlap.
    """
    if n_classes < 1 or n_per_class < 1 or dim < 1 or spread < 0:
        raise DataError("n_classes, n_per_class and dim must be positive; spread nonnegative")
    rng = np.random.default_rng(seed)
    min_dist = max(4.0 * spread, 1e-3)
    side = BLOB_BOX
    centers = []
    while len(centers) < n_classes:
        for _ in range(1000):
            c = rng.uniform(0.0, side, size=dim)
            if all(np.linalg.norm(c - o) >= min_dist for o in centers):
                centers.append(c)
                break
        else:
            side *= 2.0
    centers = np.asarray(centers)
    x = np.concatenate([c + spread * rng.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return LabeledDataset(np.clip(x, 0.0, 1.0), y, n_classes)


def train_test_split(ds: LabeledDataset, n_test: int, seed) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split keeping class proportions (largest-remainder per class)."""
    if not 0 < n_test < len(ds):
        raise DataError("n_test must lie strictly between 0 and the dataset size")
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    per_class = _largest_remainder(counts / counts.sum(), n_test)
    test_idx = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        test_idx.extend(rng.permutation(idx)[: min(per_class[c], idx.size)])
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[test_idx] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))


# -- partitioning ----------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    assignments: list  # one sorted index list per client
    alpha: float
    seed: int | None = None
    repaired: list = field(default_factory=list)  # (client, donor) moves made by the repair step

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def validate(self, n_samples: int) -> None:
        flat = np.concatenate([np.asarray(a, dtype=np.int64) for a in self.assignments]) if self.assignments else []
        if len(flat) != n_samples or not np.array_equal(np.sort(flat), np.arange(n_samples)):
            raise DataError("partition is not a disjoint cover of the training indices")

    def class_table(self, labels, n_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[np.asarray(a, dtype=np.int64)], minlength=n_classes) for a in self.assignments])

    def to_json(self) -> str:
        doc = {
            "alpha": self.alpha,
            "seed": self.seed,
            "n_clients": self.n_clients,
            "repaired": [list(m) for m in self.repaired],
            "assignments": {str(k): [int(i) for i in a] for k, a in enumerate(self.assignments)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        doc = json.loads(text)
        n = int(doc["n_clients"])
        assignments = [sorted(int(i) for i in doc["assignments"][str(k)]) for k in range(n)]
        return cls(assignments, float(doc["alpha"]), doc.get("seed"), [tuple(m) for m in doc.get("repaired", [])])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort: ties go to the lower index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, n_clients: int, alpha: float, seed) -> PartitionPlan:
    """Split each class's indices across clients with Dirichlet(alpha) proportions.

    Draws are repeated (up to ``MAX_REDRAWS`` times) until no client is empty; if
    that fails, each empty client takes one sample from the currently largest one.
    """
    labels = np.asarray(labels).astype(np.int64).ravel()
    if n_clients < 1:
        raise DataError("n_clients must be at least 1")
    if not alpha > 0:
        raise DataError("alpha must be positive")
    if labels.size < n_clients:
        raise DataError(f"{labels.size} samples cannot fill {n_clients} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)

    for attempt in range(MAX_REDRAWS):
        buckets = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            counts = _largest_remainder(rng.dirichlet(np.full(n_clients, alpha)), idx.size)
            for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[k].extend(part.tolist())
        if all(buckets):
            break
    repaired = []
    if not all(buckets):
        log.warning("dirichlet_partition: empty clients after %d draws; moving samples", MAX_REDRAWS)
        for k in range(n_clients):
            if not buckets[k]:
                donor = max(range(n_clients), key=lambda j: (len(buckets[j]), -j))
                buckets[donor].sort()
                buckets[k].append(buckets[donor].pop())
                repaired.append((k, donor))
    plan = PartitionPlan([sorted(b) for b in buckets], float(alpha), seed if isinstance(seed, int) else None, repaired)
    plan.validate(labels.size)
    return plan
