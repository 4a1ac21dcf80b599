"""Dataset ingestion (IDX, CSV, synthetic blobs) and federated partitioning.

Datasets are immutable after construction (their arrays are marked
read-only) and all loaders and partitioners are pure given their inputs, so
everything in this module can be shared freely across threads.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

PARTITION_SCHEMES = ("iid", "niid")


class DatasetError(ValueError):
    """Invalid dataset contents or construction arguments."""


class IdxFormatError(DatasetError):
    """Malformed IDX file."""


class IdxBadMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class CsvFormatError(DatasetError):
    """Malformed CSV dataset file."""


class PartitionError(DatasetError):
    """Partition plan incompatible with the dataset."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix (n_samples x n_features, float64) plus integer labels.

    ``num_classes`` may exceed the largest label present; it may never be
    smaller than max(label) + 1.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labs = np.array(self.labels, dtype=np.int64, copy=True)
        if feats.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {feats.shape}")
        if labs.ndim != 1 or labs.size != feats.shape[0]:
            raise DatasetError(
                f"labels shape {labs.shape} does not match {feats.shape[0]} samples"
            )
        if feats.shape[0] < 1:
            raise DatasetError("dataset must contain at least one sample")
        if not np.isfinite(feats).all():
            raise DatasetError("features contain non-finite values")
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be >= 1, got {self.num_classes}")
        if labs.min() < 0 or labs.max() >= self.num_classes:
            raise DatasetError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{int(labs.min())}, {int(labs.max())}]"
            )
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class Shard:
    """Sorted index view into a parent dataset, owned by one agent."""

    owner: int
    indices: np.ndarray

    def __post_init__(self) -> None:
        if self.owner < 0:
            raise DatasetError(f"shard owner must be >= 0, got {self.owner}")
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        if idx.ndim != 1:
            raise DatasetError(f"shard indices must be 1-D, got shape {idx.shape}")
        if idx.size:
            if idx[0] < 0:
                raise DatasetError("shard indices must be non-negative")
            if not np.all(np.diff(idx) > 0):
                raise DatasetError("shard indices must be strictly increasing")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str
    num_agents: int
    niid_factor: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scheme not in PARTITION_SCHEMES:
            raise PartitionError(f"unknown partition scheme {self.scheme!r}")
        if self.num_agents < 1:
            raise PartitionError(f"num_agents must be >= 1, got {self.num_agents}")
        if self.niid_factor < 1:
            raise PartitionError(f"niid_factor must be >= 1, got {self.niid_factor}")


def _read_be_u32(data: bytes, offset: int, path: str | Path) -> int:
    if len(data) < offset + 4:
        raise IdxTruncatedError(
            f"{path}: truncated at byte {len(data)}, header needs {offset + 4} bytes"
        )
    return struct.unpack_from(">I", data, offset)[0]


def load_idx(image_path: str | Path, label_path: str | Path) -> LabeledDataset:
    """Load an IDX image/label file pair (the standard MNIST on-disk format).

    Image files are big-endian: magic 0x00000803, image count, row count,
    column count, then unsigned pixel bytes row-major.  Label files: magic
    0x00000801, count, then unsigned label bytes.  Pixels are scaled to
    [0, 1] by dividing by 255 and flattened row-major; num_classes is 10.
    """
    img = Path(image_path).read_bytes()
    magic = _read_be_u32(img, 0, image_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxBadMagicError(
            f"{image_path}: bad magic 0x{magic:08x} at byte 0 "
            f"(image files use 0x{IDX_IMAGE_MAGIC:08x})"
        )
    count = _read_be_u32(img, 4, image_path)
    rows = _read_be_u32(img, 8, image_path)
    cols = _read_be_u32(img, 12, image_path)
    img_end = 16 + count * rows * cols
    if len(img) < img_end:
        raise IdxTruncatedError(
            f"{image_path}: pixel data truncated at byte {len(img)}, expected {img_end}"
        )
    if len(img) > img_end:
        raise IdxFormatError(
            f"{image_path}: {len(img) - img_end} trailing bytes after byte {img_end}"
        )

    lab = Path(label_path).read_bytes()
    lmagic = _read_be_u32(lab, 0, label_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxBadMagicError(
            f"{label_path}: bad magic 0x{lmagic:08x} at byte 0 "
            f"(label files use 0x{IDX_LABEL_MAGIC:08x})"
        )
    lcount = _read_be_u32(lab, 4, label_path)
    lab_end = 8 + lcount
    if len(lab) < lab_end:
        raise IdxTruncatedError(
            f"{label_path}: label data truncated at byte {len(lab)}, expected {lab_end}"
        )
    if len(lab) > lab_end:
        raise IdxFormatError(
            f"{label_path}: {len(lab) - lab_end} trailing bytes after byte {lab_end}"
        )
    if count != lcount:
        raise IdxCountMismatchError(
            f"image count {count} (byte 4 of {image_path}) does not match "
            f"label count {lcount} (byte 4 of {label_path})"
        )

    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = (pixels.astype(np.float64) / 255.0).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    return LabeledDataset(features, labels, num_classes=10)


def load_csv(path: str | Path, has_header: bool = False) -> LabeledDataset:
    """Load a CSV dataset: float feature columns plus a final integer label
    column.  num_classes is inferred as max(label) + 1."""
    rows: list[list[float]] = []
    labels: list[int] = []
    n_cols: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_num, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if has_header and line_num == 1:
                continue
            if n_cols is None:
                n_cols = len(cells)
                if n_cols < 2:
                    raise CsvFormatError(
                        f"{path}: line {line_num}: need at least one feature "
                        f"column plus a label, got {n_cols} column(s)"
                    )
            elif len(cells) != n_cols:
                raise CsvFormatError(
                    f"{path}: line {line_num}: expected {n_cols} columns, "
                    f"got {len(cells)}"
                )
            feats = []
            for col, cell in enumerate(cells[:-1], start=1):
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: line {line_num}, column {col}: "
                        f"non-numeric value {cell!r}"
                    ) from None
            try:
                label = int(cells[-1])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: line {line_num}: label {cells[-1]!r} is not an integer"
                ) from None
            if label < 0:
                raise CsvFormatError(f"{path}: line {line_num}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CsvFormatError(f"{path}: no samples")
    return LabeledDataset(np.array(rows), np.array(labels), num_classes=max(labels) + 1)


# Class centers are deliberately independent of the dataset seed: two blob
# datasets with the same geometry but different seeds share their centers,
# which is what transfer-learning experiments need.
_CENTER_RADIUS = 3.0
_CENTER_STREAM_TAG = 0x5B0B


def _class_center(class_index: int, num_features: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([_CENTER_STREAM_TAG, class_index]))
    v = rng.standard_normal(num_features)
    return _CENTER_RADIUS * v / np.linalg.norm(v)


def synth_blobs(
    num_samples: int,
    num_classes: int,
    num_features: int,
    cluster_spread: float,
    seed: int,
) -> LabeledDataset:
    """Class-balanced Gaussian clusters.

    Class c sits at a deterministic point on the radius-3 hypersphere (a
    fixed per-class stream, independent of ``seed``); samples are the center
    plus ``cluster_spread`` times seeded standard-normal noise.  Per-class
    counts differ by at most one.
    """
    if num_classes < 1:
        raise DatasetError(f"num_classes must be >= 1, got {num_classes}")
    if num_features < 1:
        raise DatasetError(f"num_features must be >= 1, got {num_features}")
    if num_samples < num_classes:
        raise DatasetError(
            f"num_samples {num_samples} must be >= num_classes {num_classes}"
        )
    if cluster_spread < 0:
        raise DatasetError(f"cluster_spread must be >= 0, got {cluster_spread}")
    labels = np.arange(num_samples, dtype=np.int64) % num_classes
    centers = np.stack([_class_center(c, num_features) for c in range(num_classes)])
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1)]))
    noise = rng.standard_normal((num_samples, num_features)) * cluster_spread
    return LabeledDataset(centers[labels] + noise, labels, num_classes)


def partition_iid(dataset: LabeledDataset, plan: PartitionPlan) -> list[Shard]:
    """Shuffle all indices with the plan's seed, then deal them round-robin.

    Shard sizes differ by at most one; shards are pairwise disjoint and
    jointly cover every index.
    """
    if plan.scheme != "iid":
        raise PartitionError(f"partition_iid got scheme {plan.scheme!r}")
    n = dataset.n_samples
    if plan.num_agents > n:
        raise PartitionError(f"num_agents {plan.num_agents} exceeds {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed & (2**64 - 1)]))
    perm = rng.permutation(n)
    return [
        Shard(owner=k, indices=np.sort(perm[k :: plan.num_agents]))
        for k in range(plan.num_agents)
    ]


def partition_niid(dataset: LabeledDataset, plan: PartitionPlan) -> list[Shard]:
    """Label-skewed sharding: sort indices by (label, index), cut them into
    num_agents * niid_factor contiguous blocks (sizes differing by at most
    one, remainder going one-per-block to the leading blocks), then hand
    each agent niid_factor blocks via a seeded permutation of block ids.

    Lower niid_factor means fewer, larger blocks and therefore fewer
    distinct labels per agent.
    """
    if plan.scheme != "niid":
        raise PartitionError(f"partition_niid got scheme {plan.scheme!r}")
    n = dataset.n_samples
    num_blocks = plan.num_agents * plan.niid_factor
    if num_blocks > n:
        raise PartitionError(
            f"num_agents * niid_factor = {num_blocks} exceeds {n} samples"
        )
    order = np.argsort(dataset.labels, kind="stable")
    base, extra = divmod(n, num_blocks)
    sizes = np.full(num_blocks, base, dtype=np.int64)
    sizes[:extra] += 1
    blocks = np.split(order, np.cumsum(sizes)[:-1])
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed & (2**64 - 1)]))
    perm = rng.permutation(num_blocks)
    shards = []
    for k in range(plan.num_agents):
        mine = perm[k * plan.niid_factor : (k + 1) * plan.niid_factor]
        shards.append(Shard(owner=k, indices=np.sort(np.concatenate([blocks[b] for b in mine]))))
    return shards


def shard_label_histogram(dataset: LabeledDataset, shard: Shard) -> np.ndarray:
    """Per-class sample counts within one shard (length num_classes)."""
    if shard.indices.size and shard.indices[-1] >= dataset.n_samples:
        raise DatasetError(
            f"shard index {int(shard.indices[-1])} out of range for "
            f"{dataset.n_samples} samples"
        )
    return np.bincount(dataset.labels[shard.indices], minlength=dataset.num_classes)
