"""Embedding datasets: file formats, experimental masks, batching, synthetic data.

A dataset is a fixed table of (id, embedding vector, optional class label,
split tag) rows.  Two on-disk formats are supported:

* binary: magic ``EMB1``, little-endian u32 row count, u32 dimension, u8
  labels-present flag, row-major little-endian float32 embeddings, then
  (flag=1 only) per row a u32-length-prefixed UTF-8 label and a u8 split
  code (0=train, 1=validation, 2=test).  A zero-length label marks an
  unlabeled row.
* tsv: header ``id<TAB>label<TAB>split<TAB>v1..vH``; an empty label field
  means unlabeled.

All randomized operations take an explicit seed and are bit-reproducible.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DatasetFormatError,
    DimensionMismatchError,
    EmptyDatasetError,
    MalformedHeaderError,
    NonFiniteValueError,
    UnknownSplitTagError,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
_SPLIT_CODE = {"train": 0, "validation": 1, "test": 2}
_CODE_SPLIT = {v: k for k, v in _SPLIT_CODE.items()}

_MAGIC_EMB = b"EMB1"


def rng_from(*parts: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers."""
    return np.random.default_rng(np.random.SeedSequence(list(parts)))


def derive_seed(*parts: int) -> int:
    """Collapse a tuple of integers into one reproducible seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def _round_half_away(x: float) -> int:
    # round(10.5) banker-rounds to 10; class-count arithmetic needs 11
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass
class EmbeddedDataset:
    """Immutable table of embedding rows.

    ``labels`` is either None (fully unlabeled) or a list with one entry
    per row where individual entries may be None (row-level unlabeled).
    """

    ids: list[str]
    embeddings: np.ndarray  # (n, H) float64
    labels: list[str | None] | None
    split: list[str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise DatasetFormatError("embeddings must be a 2-D matrix")
        n, h = self.embeddings.shape
        if n == 0:
            raise EmptyDatasetError("dataset has no rows")
        if h < 1:
            raise DimensionMismatchError("embedding dimension must be >= 1")
        if len(self.ids) != n:
            raise DimensionMismatchError(
                f"{len(self.ids)} ids for {n} embedding rows")
        if self.labels is not None and len(self.labels) != n:
            raise DimensionMismatchError(
                f"{len(self.labels)} labels for {n} embedding rows")
        if len(self.split) != n:
            raise DimensionMismatchError(
                f"{len(self.split)} split tags for {n} embedding rows")
        bad = np.flatnonzero(~np.isfinite(self.embeddings).all(axis=1))
        if bad.size:
            raise NonFiniteValueError("non-finite embedding value", row=int(bad[0]))
        for i, tag in enumerate(self.split):
            if tag not in SPLITS:
                raise UnknownSplitTagError(f"unknown split tag {tag!r}", row=i)
        self.embeddings.flags.writeable = False

    @property
    def num_samples(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def has_full_labels(self) -> bool:
        return self.labels is not None and all(l is not None for l in self.labels)

    def class_ids(self) -> list[str]:
        """Distinct class identifiers in sorted order."""
        if self.labels is None:
            return []
        return sorted({l for l in self.labels if l is not None})

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.split) if s == split],
                        dtype=np.intp)

    def subset(self, indices) -> "EmbeddedDataset":
        """New dataset holding the given rows, order preserved."""
        indices = np.asarray(indices, dtype=np.intp)
        return EmbeddedDataset(
            ids=[self.ids[i] for i in indices],
            embeddings=self.embeddings[indices].copy(),
            labels=None if self.labels is None else [self.labels[i] for i in indices],
            split=[self.split[i] for i in indices],
        )


@dataclass
class ExperimentMask:
    """Which classes are 'known' and which training samples carry labels."""

    known_classes: set[str]
    labeled_sample_ids: set[str]
    seed: int
    labeled_ratio: float
    unknown_class_ratio: float


@dataclass
class Batch:
    indices: np.ndarray
    size: int = field(init=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        self.size = int(self.indices.size)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_dataset(path, format: str = "auto") -> EmbeddedDataset:
    """Parse an embedding file.  ``format`` is 'binary', 'tsv' or 'auto'."""
    if format == "auto":
        with open(path, "rb") as fh:
            head = fh.read(4)
        format = "binary" if head == _MAGIC_EMB else "tsv"
    if format == "binary":
        return _load_binary(path)
    if format == "tsv":
        return _load_tsv(path)
    raise ValueError(f"unknown dataset format {format!r}")


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise DatasetFormatError(f"truncated file while reading {what}")
    return buf


def _load_binary(path) -> EmbeddedDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC_EMB:
            raise MalformedHeaderError(
                f"bad magic bytes {magic!r}, expected {_MAGIC_EMB!r}")
        rows, dim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        (flag,) = struct.unpack("<B", _read_exact(fh, 1, "labels flag"))
        if rows == 0:
            raise EmptyDatasetError("binary file declares zero rows")
        if dim == 0:
            raise DimensionMismatchError("binary file declares zero dimension")
        if flag not in (0, 1):
            raise MalformedHeaderError(f"labels flag must be 0 or 1, got {flag}")
        raw = _read_exact(fh, rows * dim * 4, "embedding block")
        emb = np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float64)
        labels: list[str | None] | None = None
        split = ["train"] * rows
        if flag == 1:
            labels = []
            for i in range(rows):
                (ln,) = struct.unpack("<I", _read_exact(fh, 4, f"label length of row {i}"))
                text = _read_exact(fh, ln, f"label of row {i}").decode("utf-8")
                (code,) = struct.unpack("<B", _read_exact(fh, 1, f"split code of row {i}"))
                if code not in _CODE_SPLIT:
                    raise UnknownSplitTagError(f"unknown split code {code}", row=i)
                labels.append(text if text else None)
                split[i] = _CODE_SPLIT[code]
            if all(l is None for l in labels):
                labels = None
        trailing = fh.read(1)
        if trailing:
            raise DatasetFormatError("trailing bytes after declared content")
    bad = np.flatnonzero(~np.isfinite(emb).all(axis=1))
    if bad.size:
        raise NonFiniteValueError("non-finite embedding value", row=int(bad[0]))
    ids = [str(i) for i in range(rows)]
    return EmbeddedDataset(ids=ids, embeddings=emb, labels=labels, split=split)


def save_dataset_binary(ds: EmbeddedDataset, path) -> None:
    """Write the binary format.  Labels/splits are stored whenever the
    dataset has labels OR any row is outside the train split (the flag=0
    layout cannot carry split tags)."""
    needs_tags = ds.labels is not None or any(s != "train" for s in ds.split)
    with open(path, "wb") as fh:
        fh.write(_MAGIC_EMB)
        fh.write(struct.pack("<II", ds.num_samples, ds.dim))
        fh.write(struct.pack("<B", 1 if needs_tags else 0))
        fh.write(np.ascontiguousarray(ds.embeddings, dtype="<f4").tobytes())
        if needs_tags:
            for i in range(ds.num_samples):
                label = "" if ds.labels is None else (ds.labels[i] or "")
                raw = label.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", _SPLIT_CODE[ds.split[i]]))


def _load_tsv(path) -> EmbeddedDataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise MalformedHeaderError("empty file")
        cols = header.rstrip("\n").split("\t")
        if len(cols) < 4 or cols[0] != "id" or cols[1] != "label" or cols[2] != "split":
            raise MalformedHeaderError(
                "header must be id<TAB>label<TAB>split<TAB>v1..vH")
        dim = len(cols) - 3
        ids: list[str] = []
        labels: list[str | None] = []
        split: list[str] = []
        vectors: list[list[float]] = []
        for row, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 + dim:
                raise DimensionMismatchError(
                    f"expected {3 + dim} fields, got {len(parts)}", row=row)
            if parts[2] not in SPLITS:
                raise UnknownSplitTagError(f"unknown split tag {parts[2]!r}", row=row)
            try:
                vec = [float(v) for v in parts[3:]]
            except ValueError:
                raise DatasetFormatError("unparseable embedding value", row=row)
            if not all(math.isfinite(v) for v in vec):
                raise NonFiniteValueError("non-finite embedding value", row=row)
            ids.append(parts[0])
            labels.append(parts[1] if parts[1] else None)
            split.append(parts[2])
            vectors.append(vec)
    if not vectors:
        raise EmptyDatasetError("tsv file has no data rows")
    return EmbeddedDataset(
        ids=ids,
        embeddings=np.array(vectors, dtype=np.float64),
        labels=None if all(l is None for l in labels) else labels,
        split=split,
    )


# ---------------------------------------------------------------------------
# experimental protocol
# ---------------------------------------------------------------------------

def make_experiment_mask(ds: EmbeddedDataset, unknown_class_ratio: float,
                         labeled_ratio: float, seed: int) -> ExperimentMask:
    """Draw the known-class set and the labeled training subset.

    The known-class count is round(K * (1 - unknown_class_ratio)), at
    least 1.  The labeled-sample target is floor(labeled_ratio * |train|)
    computed against the whole training split; it is drawn uniformly
    without replacement from training samples of known classes, so the
    actual count falls short when that pool is smaller (logged).
    """
    if not ds.has_full_labels():
        raise ValueError("experiment mask requires a fully labeled dataset")
    if not (0.0 <= unknown_class_ratio < 1.0):
        raise ValueError("unknown_class_ratio must be in [0, 1)")
    if not (0.0 < labeled_ratio <= 1.0):
        raise ValueError("labeled_ratio must be in (0, 1]")

    classes = ds.class_ids()
    n_known = max(1, _round_half_away(len(classes) * (1.0 - unknown_class_ratio)))
    rng = rng_from(seed)
    perm = rng.permutation(len(classes))
    known = {classes[i] for i in perm[:n_known]}

    train_idx = ds.split_indices("train")
    target = int(math.floor(labeled_ratio * train_idx.size))
    pool = np.array([i for i in train_idx if ds.labels[i] in known], dtype=np.intp)
    take = min(target, pool.size)
    if take < target:
        logger.warning(
            "labeled pool smaller than target: %d known-class training "
            "samples for a target of %d", pool.size, target)
    chosen = rng.choice(pool, size=take, replace=False) if take else np.array([], dtype=np.intp)
    labeled_ids = {ds.ids[i] for i in chosen}
    return ExperimentMask(
        known_classes=known,
        labeled_sample_ids=labeled_ids,
        seed=seed,
        labeled_ratio=labeled_ratio,
        unknown_class_ratio=unknown_class_ratio,
    )


def subsample_imbalanced(ds: EmbeddedDataset, gamma: float, seed: int) -> EmbeddedDataset:
    """Class-imbalanced subsample.

    With classes 1..N in sorted-identifier order, a sample of class c is
    kept independently with probability gamma + (1-gamma)*(c-1)/(N-1):
    class 1 keeps with probability gamma, class N with probability 1.
    """
    if not ds.has_full_labels():
        raise ValueError("imbalance subsampling requires a fully labeled dataset")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    classes = ds.class_ids()
    n_cls = len(classes)
    if n_cls == 1:
        prob = {classes[0]: 1.0}
    else:
        prob = {c: gamma + (1.0 - gamma) * i / (n_cls - 1)
                for i, c in enumerate(classes)}
    rng = rng_from(seed)
    draws = rng.random(ds.num_samples)
    keep = [i for i in range(ds.num_samples) if draws[i] < prob[ds.labels[i]]]
    if not keep:
        raise ValueError("imbalance subsampling removed every sample")
    return ds.subset(keep)


def iter_batches(ds: EmbeddedDataset, split: str, batch_size: int,
                 shuffle_seed: int) -> list[Batch]:
    """Shuffled batches covering the split exactly once; last may be short."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (pairwise losses need pairs)")
    idx = ds.split_indices(split)
    perm = rng_from(shuffle_seed).permutation(idx)
    return [Batch(perm[i:i + batch_size]) for i in range(0, perm.size, batch_size)]


def batches_over(indices: np.ndarray, batch_size: int, shuffle_seed: int) -> list[Batch]:
    """Like iter_batches but over an explicit index pool (e.g. labeled rows)."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (pairwise losses need pairs)")
    indices = np.asarray(indices, dtype=np.intp)
    perm = rng_from(shuffle_seed).permutation(indices)
    return [Batch(perm[i:i + batch_size]) for i in range(0, perm.size, batch_size)]


def generate_synthetic_blobs(num_classes: int, per_class: int, dim: int,
                             centroid_scale: float, noise_sigma: float,
                             seed: int) -> EmbeddedDataset:
    """Gaussian blobs around uniformly drawn centroids.

    Centroids are uniform in [-centroid_scale, centroid_scale]^dim, samples
    add isotropic N(0, noise_sigma^2) noise.  Each class is split 80/10/10
    into train/validation/test so every class appears in every split.
    """
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must be positive")
    if centroid_scale <= 0 or noise_sigma < 0:
        raise ValueError("centroid_scale must be positive, noise_sigma >= 0")
    rng = rng_from(seed)
    centroids = rng.uniform(-centroid_scale, centroid_scale, size=(num_classes, dim))
    n_total = num_classes * per_class
    noise = rng.standard_normal((n_total, dim)) * noise_sigma
    emb = np.repeat(centroids, per_class, axis=0) + noise

    n_val = per_class // 10
    n_test = per_class // 10
    n_train = per_class - n_val - n_test
    per_class_split = (["train"] * n_train + ["validation"] * n_val + ["test"] * n_test)

    ids = [f"s{i:06d}" for i in range(n_total)]
    labels = [f"class{c:03d}" for c in range(num_classes) for _ in range(per_class)]
    split = per_class_split * num_classes
    return EmbeddedDataset(ids=ids, embeddings=emb, labels=labels, split=split)
