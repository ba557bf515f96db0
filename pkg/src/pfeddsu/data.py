"""Datasets, label-skew partitioning and IDX / CIFAR binary readers."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3072
CIFAR_CLASSES = {"cifar10": 10, "coarse": 20, "fine": 100}


class DatasetFormatError(ValueError):
    """A malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be count x dim with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.provenance)


def synth_classification(num_classes: int, per_class: int, dim: int, separation: float,
                         rng: Rng) -> Dataset:
    """Unit-covariance Gaussian blobs with class means drawn uniformly on a sphere.

    The sphere has radius ``separation``; classes are balanced and the rows are
    ordered by class.
    """
    if min(num_classes, per_class, dim) < 1 or separation < 0:
        raise ValueError("counts must be >= 1 and separation >= 0")
    gen = rng.generator()
    means = gen.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = means[labels] + gen.standard_normal((len(labels), dim))
    return Dataset(inputs, labels, num_classes, "synthetic")


# --- partitioning -----------------------------------------------------------

@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset

    @property
    def classes(self) -> set[int]:
        return set(np.unique(self.train.labels).tolist())


@dataclass
class PartitionPlan:
    num_clients: int
    classes_per_client: int
    client_classes: list[list[int]]
    train_indices: list[list[int]]
    test_indices: list[list[int]]
    train_fraction: float = 0.8
    shard_size: int = 0
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def indices(self, client: int) -> list[int]:
        return sorted(self.train_indices[client] + self.test_indices[client])

    def shards(self, data: Dataset) -> list[ClientShard]:
        return [ClientShard(i, data.subset(self.train_indices[i]), data.subset(self.test_indices[i]))
                for i in range(self.num_clients)]

    def to_json(self) -> str:
        return json.dumps({
            "num_clients": self.num_clients,
            "classes_per_client": self.classes_per_client,
            "train_fraction": self.train_fraction,
            "shard_size": self.shard_size,
            "dropped": self.dropped,
            "client_classes": self.client_classes,
            "train_indices": self.train_indices,
            "test_indices": self.test_indices,
        }, sort_keys=True)


def deal_classes(num_clients: int, num_classes: int, s: int, gen: np.random.Generator) -> list[list[int]]:
    """Assign ``s`` distinct classes to each client.

    Classes are visited in a random order and dealt round-robin: client ``i``
    takes the next ``s`` slots of the cyclic sequence, so every client's classes
    are distinct and per-class holder counts differ by at most one.
    """
    order = gen.permutation(num_classes)
    out = []
    for i in range(num_clients):
        out.append([int(order[(i * s + j) % num_classes]) for j in range(s)])
    return out


def partition_by_classes(data: Dataset, num_clients: int, s: int, rng: Rng,
                         train_fraction: float = 0.8) -> PartitionPlan:
    """Label-skew split where each client holds samples of exactly min(s, K) classes.

    Each class's (shuffled) samples are cut into equal contiguous shards, one per
    client holding that class; the common shard size is the smallest that every
    class can supply, and the remainder is dropped. Every shard is then split
    into train/test by ``train_fraction`` so both splits carry every class.
    """
    k = data.num_classes
    if num_clients < 1 or s < 1:
        raise ValueError("num_clients and s must be >= 1")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    s = min(s, k)
    gen = rng.generator()
    classes = deal_classes(num_clients, k, s, gen)
    holders: dict[int, list[int]] = {c: [] for c in range(k)}
    for i, cs in enumerate(classes):
        for c in cs:
            holders[c].append(i)

    by_class = {c: np.flatnonzero(data.labels == c) for c in range(k)}
    sizes = [len(by_class[c]) // len(h) for c, h in holders.items() if h]
    shard = min(sizes) if sizes else 0
    if shard < 2:
        raise ValueError(
            f"infeasible partition: {num_clients} clients x {s} classes needs at least 2 samples "
            f"per shard, but the smallest class supports only {shard} "
            f"(class counts {[len(by_class[c]) for c in range(k)]})")
    n_train = min(max(1, int(round(train_fraction * shard))), shard - 1)

    train = [[] for _ in range(num_clients)]
    test = [[] for _ in range(num_clients)]
    dropped = 0
    for c in range(k):
        idx = by_class[c][gen.permutation(len(by_class[c]))]
        for slot, client in enumerate(holders[c]):
            piece = idx[slot * shard:(slot + 1) * shard]
            train[client] += piece[:n_train].tolist()
            test[client] += piece[n_train:].tolist()
        dropped += len(idx) - shard * len(holders[c])
    return PartitionPlan(num_clients, s, classes, [sorted(t) for t in train], [sorted(t) for t in test],
                         train_fraction, shard, dropped)


# --- file formats -------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(buf: bytes, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    if len(buf) < 4:
        raise DatasetFormatError(f"{what}: file too short for header", 0)
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise DatasetFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{what}: truncated dimension header", 4)
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(buf) - start < need:
        raise DatasetFormatError(
            f"{what}: payload has {len(buf) - start} bytes, header promises {need}", len(buf))
    return dims, buf[start:start + need]


def load_idx_gzip(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (gzip or raw) into a [0, 1]-scaled Dataset."""
    dims, pix = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    ldims, lab = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if ldims[0] != dims[0]:
        raise DatasetFormatError(f"count mismatch: {dims[0]} images but {ldims[0]} labels", 4)
    x = np.frombuffer(pix, dtype=np.uint8).reshape(dims[0], -1).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if len(y) else 1, "idx-file")


def write_idx_gzip(dataset: Dataset, images_path, labels_path, side: int | None = None) -> None:
    """Write pixels (rounded from [0, 1] to bytes) and labels as gzip IDX files."""
    n, d = dataset.inputs.shape
    side = side or int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"feature dim {d} is not a square image")
    pix = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    head = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, side, side)
    Path(images_path).write_bytes(gzip.compress(head + pix.tobytes(), mtime=0))
    Path(labels_path).write_bytes(
        gzip.compress(struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes(), mtime=0))


def load_cifar_binary(path, variant: str = "cifar10") -> Dataset:
    """Read a CIFAR binary batch file.

    ``variant`` is ``"cifar10"`` (1 label byte per record), or ``"coarse"`` /
    ``"fine"`` for CIFAR-100 records with label bytes (coarse, fine).
    """
    if variant not in CIFAR_CLASSES:
        raise ValueError(f"variant must be one of {sorted(CIFAR_CLASSES)}, got {variant!r}")
    n_label = 1 if variant == "cifar10" else 2
    rec = n_label + CIFAR_PIXELS
    buf = _read_bytes(path)
    if len(buf) == 0 or len(buf) % rec:
        raise DatasetFormatError(
            f"size {len(buf)} is not a positive multiple of the {rec}-byte record", len(buf) - len(buf) % rec)
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    label_col = 1 if variant == "fine" else 0
    y = arr[:, label_col].astype(np.int64)
    x = arr[:, n_label:].astype(np.float64) / 255.0
    return Dataset(x, y, CIFAR_CLASSES[variant], "cifar-binary")


def write_cifar_binary(dataset: Dataset, path, coarse_labels=None) -> None:
    """Inverse of :func:`load_cifar_binary`; pass ``coarse_labels`` for CIFAR-100 records."""
    pix = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    if pix.shape[1] != CIFAR_PIXELS:
        raise ValueError(f"CIFAR records need {CIFAR_PIXELS} features")
    cols = [dataset.labels.astype(np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.hstack(cols + [pix]).tobytes())
