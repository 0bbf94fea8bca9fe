"""Datasets, IDX I/O, the synthetic generator and the skewed partitioner."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .errors import ConsistencyError, FormatError, PartitionError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"{self.features.shape[0]} feature rows but labels have shape {self.labels.shape}"
            )
        if self.class_count < 1:
            raise ValidationError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(self.features).all():
            raise ValidationError("features contain non-finite values")
        if self.features.size and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise ValidationError("features must be normalized to [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class PartitionSpec:
    client_count: int = 5
    alpha: float = 0.8
    skewed_class: int | None = None
    unlearning_client: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 2:
            raise ValidationError("client_count must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.unlearning_client != 0:
            raise ValidationError("the unlearning client is always client 0")

    def resolve_skewed_class(self, class_count: int) -> int:
        if self.skewed_class is None:
            return int(seeding.make_rng(self.seed, seeding.SKEW_CLASS).integers(class_count))
        if not 0 <= self.skewed_class < class_count:
            raise ValidationError(f"skewed_class {self.skewed_class} outside [0, {class_count})")
        return int(self.skewed_class)


@dataclass
class ClientShard:
    client_id: int
    data: LabeledDataset
    generated_mask: np.ndarray | None = None
    # row -> index in the source dataset, -1 for generated rows
    source_index: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.data)
        if self.generated_mask is None:
            self.generated_mask = np.zeros(n, dtype=bool)
        self.generated_mask = np.asarray(self.generated_mask, dtype=bool)
        if self.source_index is None:
            self.source_index = np.full(n, -1, dtype=np.int64)
        self.source_index = np.asarray(self.source_index, dtype=np.int64)
        if self.generated_mask.shape != (n,) or self.source_index.shape != (n,):
            raise ValidationError("generated_mask / source_index length must equal the row count")

    def __len__(self) -> int:
        return len(self.data)

    def class_count_of(self, cls: int) -> int:
        return int(np.sum(self.data.labels == cls))


# --------------------------------------------------------------------- IDX


def _read_idx(path, expected_magic: int, kind: str) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated at byte offset {len(buf)} (no magic)", offset=len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: magic 0x{magic:08x} is not a valid IDX {kind} magic 0x{expected_magic:08x}",
            offset=0,
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise FormatError(f"{path}: truncated at byte offset {len(buf)} inside header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    size = int(np.prod(dims))
    if len(buf) < header_end + size:
        raise FormatError(
            f"{path}: truncated at byte offset {len(buf)}; expected {header_end + size} bytes",
            offset=len(buf),
        )
    if len(buf) > header_end + size:
        raise FormatError(f"{path}: trailing bytes after offset {header_end + size}",
                          offset=header_end + size)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels in {labels_path}"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(features, labels, class_count)


def write_idx(dataset: LabeledDataset, images_path, labels_path, image_shape=None) -> None:
    """Write features (rounded to bytes) and labels as an IDX pair."""
    n, d = dataset.features.shape
    if image_shape is None:
        side = int(round(np.sqrt(d)))
        image_shape = (side, side) if side * side == d else (d, 1)
    if int(np.prod(image_shape)) != d:
        raise ValidationError(f"image_shape {image_shape} does not hold {d} features")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *image_shape)
    Path(images_path).write_bytes(header + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------- synthetic


def gen_synthetic(class_count: int, per_class: int, dim: int, cluster_std: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian blobs around seeded centers in [0,1]^dim, min-max scaled.

    Rows are ordered by class.
    """
    if class_count < 1 or per_class < 1 or dim < 1:
        raise ValidationError("class_count, per_class and dim must be positive")
    if not cluster_std > 0:
        raise ValidationError("cluster_std must be positive")
    rng = seeding.make_rng(seed, seeding.SYNTHETIC)
    centers = rng.uniform(0.0, 1.0, size=(class_count, dim))
    x = np.concatenate([c + cluster_std * rng.standard_normal((per_class, dim)) for c in centers])
    y = np.repeat(np.arange(class_count), per_class)
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    x = np.clip((x - lo) / span, 0.0, 1.0)
    return LabeledDataset(x, y, class_count)


def split_per_class(dataset: LabeledDataset, test_per_class: int, seed: int):
    """Seeded per-class holdout: returns (train, test)."""
    rng = seeding.make_rng(seed, seeding.SYNTHETIC, 1)
    test_idx = []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) <= test_per_class:
            raise ValidationError(f"class {c} has only {len(idx)} samples")
        test_idx.append(rng.permutation(idx)[:test_per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[test_idx] = False
    return dataset.subset(np.flatnonzero(train_mask)), dataset.subset(test_idx)


# --------------------------------------------------------------- partition


def _even_split(total: int, parts: int, rng) -> np.ndarray:
    """Split ``total`` into ``parts`` counts differing by at most one; extras go to random parts."""
    counts = np.full(parts, total // parts, dtype=np.int64)
    extra = total - counts.sum()
    if extra:
        counts[np.sort(rng.choice(parts, size=extra, replace=False))] += 1
    return counts


def _slot_sequence(quotas: np.ndarray) -> np.ndarray:
    """Client ids laid out so each client's slots are spread evenly along the sequence."""
    keys, owners = [], []
    for client, q in enumerate(quotas):
        if q > 0:
            keys.append((np.arange(q) + 0.5) / q)
            owners.append(np.full(q, client, dtype=np.int64))
    if not keys:
        return np.zeros(0, dtype=np.int64)
    keys = np.concatenate(keys)
    owners = np.concatenate(owners)
    order = np.lexsort((owners, keys))
    return owners[order]


@dataclass
class Partition:
    shards: list[ClientShard]
    skewed_class: int
    spec: PartitionSpec
    notes: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        clients = []
        for shard in self.shards:
            per_class = {}
            for c in range(shard.data.class_count):
                per_class[str(c)] = shard.source_index[shard.data.labels == c].tolist()
            clients.append({
                "client_id": shard.client_id,
                "total": len(shard),
                "class_counts": shard.data.class_counts().tolist(),
                "indices": per_class,
            })
        return {
            "client_count": self.spec.client_count,
            "unlearning_client": self.spec.unlearning_client,
            "alpha": self.spec.alpha,
            "seed": self.spec.seed,
            "skewed_class": self.skewed_class,
            "notes": self.notes,
            "clients": clients,
        }

    def write_manifest(self, path) -> None:
        from .checkpoint import atomic_write_bytes

        atomic_write_bytes(path, json.dumps(self.manifest(), indent=1).encode())


def partition_skewed(dataset: LabeledDataset, spec: PartitionSpec) -> Partition:
    """Give the unlearning client floor(alpha * n_skew) skewed samples and equalize totals.

    The remaining skewed samples are split evenly over the other clients.
    Non-skewed samples are shuffled per class and dealt proportionally to each
    client's outstanding quota, so every client ends with ``N // K`` or
    ``N // K + 1`` samples and a near-uniform mix of the majority classes.
    """
    k = spec.client_count
    skew = spec.resolve_skewed_class(dataset.class_count)
    counts = dataset.class_counts()
    present = counts[counts > 0]
    if present.size == 0 or present.min() < k:
        raise PartitionError(f"every present class needs at least {k} samples; counts={counts.tolist()}")
    if counts[skew] < k:
        raise PartitionError(f"skewed class {skew} has {counts[skew]} samples, need at least {k}")
    rng = seeding.make_rng(spec.seed, seeding.PARTITION)
    n_total = len(dataset)
    n_skew = int(counts[skew])

    # rounding guards against 0.29 * 100 == 28.999999999999996
    u = int(np.floor(round(spec.alpha * n_skew, 9)))
    skew_counts = np.zeros(k, dtype=np.int64)
    skew_counts[0] = u
    skew_counts[1:] = _even_split(n_skew - u, k - 1, rng)

    totals = _even_split(n_total, k, rng)
    quotas = totals - skew_counts
    if (quotas < 0).any():
        bad = int(np.flatnonzero(quotas < 0)[0])
        raise PartitionError(
            f"alpha={spec.alpha} puts {skew_counts[bad]} skewed samples on client {bad} but "
            f"equal totals allow at most {totals[bad]}; lower alpha or add clients"
        )

    skew_idx = rng.permutation(np.flatnonzero(dataset.labels == skew))
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
    start = 0
    for client in range(k):
        assigned[client].append(skew_idx[start:start + skew_counts[client]])
        start += skew_counts[client]

    stream = [rng.permutation(np.flatnonzero(dataset.labels == c))
              for c in range(dataset.class_count) if c != skew]
    stream = np.concatenate(stream) if stream else np.zeros(0, dtype=np.int64)
    owners = _slot_sequence(quotas)
    for client in range(k):
        assigned[client].append(stream[owners == client])

    shards = []
    for client in range(k):
        idx = np.sort(np.concatenate(assigned[client]))
        shards.append(ClientShard(client, dataset.subset(idx), source_index=idx))
    notes = {
        "majority_deal": "per-class seeded shuffle, dealt proportionally to client quota",
        "skew_counts": skew_counts.tolist(),
        "totals": totals.tolist(),
    }
    return Partition(shards, skew, spec, notes)
