"""Synthetic datasets and federated shard planning.

Partitioning follows the label-shard recipe: disjoint class groups are
assigned to disjoint client groups, examples spread evenly (within one) over
the group's members, then each client's pool is cut into a held-out test
slice plus a 0.9/0.1 train/validation split. Everything is a pure function
of its inputs and a seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_MAGIC = b"FNDS"
_VERSION = 1


@dataclass
class LabeledDataset:
    examples: np.ndarray  # (N, ...) float64
    labels: np.ndarray    # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.examples) != len(self.labels):
            raise ValueError("examples/labels length mismatch")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)


@dataclass
class ShardPlan:
    """Per-client index lists into one LabeledDataset."""

    train: list[np.ndarray] = field(default_factory=list)
    val: list[np.ndarray] = field(default_factory=list)
    test: list[np.ndarray] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.train)

    def client_size(self, k: int) -> int:
        return len(self.train[k]) + len(self.val[k]) + len(self.test[k])

    def validate(self, dataset_size: int) -> None:
        seen = np.concatenate([idx for triple in (self.train, self.val, self.test)
                               for idx in triple]) if self.num_clients else np.array([], dtype=int)
        if len(seen) != dataset_size or len(np.unique(seen)) != len(seen):
            raise ValueError("shard plan is not a disjoint cover of the dataset")


def generate_synthetic(num_classes: int, shape, per_class: int, difficulty: float, seed: int) -> LabeledDataset:
    """Class template + seeded Gaussian noise scaled by `difficulty`.

    At difficulty 0 the classes are exactly separable by nearest template.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    shape = tuple(int(v) for v in shape)
    if any(v < 1 for v in shape):
        raise ValueError(f"degenerate example shape {shape}")
    rng = np.random.default_rng([int(seed), 0xDA7A])
    templates = rng.normal(0.0, 1.0, (num_classes,) + shape)
    examples = np.empty((num_classes * per_class,) + shape)
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        noise = rng.normal(0.0, 1.0, (per_class,) + shape)
        examples[c * per_class:(c + 1) * per_class] = templates[c] + difficulty * noise
        labels[c * per_class:(c + 1) * per_class] = c
    return LabeledDataset(examples=examples, labels=labels, num_classes=num_classes)


def _split_client_pool(indices: np.ndarray, test_fraction: float):
    """Carve test slice, then split the rest 0.9/0.1 into train/val."""
    n = len(indices)
    n_test = int(round(n * test_fraction))
    rest = n - n_test
    n_val = int(round(rest * 0.1))
    test = indices[:n_test]
    val = indices[n_test:n_test + n_val]
    train = indices[n_test + n_val:]
    return train, val, test


def partition_noniid(dataset: LabeledDataset, num_clients: int, scheme, seed: int,
                     test_fraction: float = 0.1) -> ShardPlan:
    """Label-shard partition.

    `scheme` is a list of (class_group, client_group) pairs; class groups must
    cover every class exactly once and client groups every client exactly once.
    Within a pair, examples are shuffled and spread evenly (within one) over
    the member clients.
    """
    all_classes = [c for classes, _ in scheme for c in classes]
    all_clients = [k for _, clients in scheme for k in clients]
    if sorted(all_classes) != list(range(dataset.num_classes)):
        raise ConfigError("partition scheme class groups must cover each class exactly once")
    if sorted(all_clients) != list(range(num_clients)):
        raise ConfigError("partition scheme client groups must cover each client exactly once")
    rng = np.random.default_rng([int(seed), 0x5A4D])
    plan = ShardPlan(train=[None] * num_clients, val=[None] * num_clients, test=[None] * num_clients)
    for classes, clients in scheme:
        mask = np.isin(dataset.labels, list(classes))
        pool = np.flatnonzero(mask)
        pool = pool[rng.permutation(len(pool))]
        chunks = np.array_split(pool, len(clients))
        for k, chunk in zip(clients, chunks):
            train, val, test = _split_client_pool(chunk, test_fraction)
            plan.train[k], plan.val[k], plan.test[k] = train, val, test
    plan.validate(len(dataset))
    return plan


def iid_partition(dataset: LabeledDataset, num_clients: int, seed: int,
                  test_fraction: float = 0.1) -> ShardPlan:
    if num_clients < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng([int(seed), 0x11D])
    pool = rng.permutation(len(dataset))
    chunks = np.array_split(pool, num_clients)
    plan = ShardPlan()
    for chunk in chunks:
        train, val, test = _split_client_pool(chunk, test_fraction)
        plan.train.append(train)
        plan.val.append(val)
        plan.test.append(test)
    plan.validate(len(dataset))
    return plan


def three_group_scheme(num_classes: int, num_clients: int):
    """The default 3/3/4 non-iid grouping (first 3 classes to the first
    3 clients, middle 3 to the middle 3, last 4 to the last 4), generalized:
    classes and clients are cut into three contiguous groups of ratio 3:3:4."""
    if num_classes == 10 and num_clients == 10:
        return [
            (list(range(0, 3)), list(range(0, 3))),
            (list(range(3, 6)), list(range(3, 6))),
            (list(range(6, 10)), list(range(6, 10))),
        ]
    cuts_c = [round(num_classes * 0.3), round(num_classes * 0.6)]
    cuts_k = [round(num_clients * 0.3), round(num_clients * 0.6)]
    groups = []
    prev_c, prev_k = 0, 0
    for cc, ck in zip(cuts_c + [num_classes], cuts_k + [num_clients]):
        classes = list(range(prev_c, cc))
        clients = list(range(prev_k, ck))
        if classes and clients:
            groups.append((classes, clients))
        prev_c, prev_k = cc, ck
    return groups


# ---------------------------------------------------------------------------
# flat binary import/export (little-endian): magic, version u32, num_classes
# u32, ndim u32, dims u32..., count u64, labels int64, examples float64

def save_dataset(path, dataset: LabeledDataset) -> None:
    shape = dataset.examples.shape[1:]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, dataset.num_classes, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<Q", len(dataset)))
        fh.write(dataset.labels.astype("<i8").tobytes())
        fh.write(dataset.examples.astype("<f8").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError(f"{path} is not a dataset file")
        version, num_classes, ndim = struct.unpack("<III", fh.read(12))
        if version != _VERSION:
            raise ConfigError(f"unsupported dataset version {version}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        (count,) = struct.unpack("<Q", fh.read(8))
        labels = np.frombuffer(fh.read(8 * count), dtype="<i8").astype(np.int64)
        n_vals = count * int(np.prod(shape))
        examples = np.frombuffer(fh.read(8 * n_vals), dtype="<f8").reshape((count,) + shape)
    return LabeledDataset(examples=examples.copy(), labels=labels, num_classes=num_classes)
