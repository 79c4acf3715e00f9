"""Synthetic dataset generation, Dirichlet non-iid partitioning, CSV loading.

The synthetic task is Gaussian class clusters at configurable separation.
The fine-tuning distribution is a rotated and shifted variant of the
pre-training one, so a backbone trained on the pre-training split is useful
but imperfect on the fine-tuning data. Partitioning follows the per-class
label-skew convention: each class's examples are split across clients by
proportions drawn from Dirichlet(alpha * 1_K).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import linalg
from .model import Example

# Fine-tuning distribution: class means are cyclically permuted (the
# backbone still resolves every cluster but assigns it to the wrong class),
# tilted toward fresh directions by a small angle, and globally shifted.
FINETUNE_ROTATION = 0.1
FINETUNE_SHIFT = 0.05


class CsvFormatError(ValueError):
    """Malformed dataset file; the message carries the offending line."""


@dataclass
class Dataset:
    features: np.ndarray  # n x d, float64
    labels: np.ndarray    # n, int64 in [0, class_count)
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree in length")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> Example:
        return Example(x=self.features[i], y=int(self.labels[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            class_count=self.class_count,
        )


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    clients: int
    seed: int

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")


def _sample_split(rng, means, size, dim):
    labels = rng.permutation(np.arange(size) % len(means)).astype(np.int64)
    feats = means[labels] + rng.standard_normal((size, dim))
    return feats, labels


def gen_synthetic(
    class_count: int, feature_dim: int, size: int, margin: float, seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """(pretrain, finetune, eval) datasets of Gaussian class clusters.

    Class means sit margin apart (in units of the unit cluster deviation) on
    orthonormal directions. The fine-tuning means are the pre-training means
    rotated toward fresh directions and shifted, and the eval split is drawn
    from the fine-tuning distribution. The eval split holds size // 4
    examples (at least one per class); everything is deterministic in seed.
    """
    if class_count < 2:
        raise ValueError(f"need at least 2 classes, got {class_count}")
    if feature_dim < class_count:
        raise ValueError(f"feature_dim {feature_dim} < class_count {class_count}")
    if margin < 0.0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    root = np.random.SeedSequence(entropy=(int(seed), 0x5D))
    r_dirs, r_pre, r_fine, r_eval = [np.random.default_rng(s) for s in root.spawn(4)]

    basis, _ = linalg.qr_thin(r_dirs.standard_normal((feature_dim, class_count)))
    basis2, _ = linalg.qr_thin(r_dirs.standard_normal((feature_dim, class_count)))
    radius = margin / np.sqrt(2.0)  # pairwise mean distance = margin
    means_pre = radius * basis.T
    fresh = radius * basis2.T
    permuted = np.roll(means_pre, 1, axis=0)
    cos, sin = np.cos(FINETUNE_ROTATION), np.sin(FINETUNE_ROTATION)
    shift = FINETUNE_SHIFT * radius * r_dirs.standard_normal(feature_dim) / np.sqrt(feature_dim)
    means_fine = cos * permuted + sin * fresh + shift

    eval_size = max(class_count, size // 4)
    pre = Dataset(*_sample_split(r_pre, means_pre, size, feature_dim), class_count)
    fine = Dataset(*_sample_split(r_fine, means_fine, size, feature_dim), class_count)
    heldout = Dataset(*_sample_split(r_eval, means_fine, eval_size, feature_dim), class_count)
    return pre, fine, heldout


def class_proportions(spec: PartitionSpec, class_count: int) -> np.ndarray:
    """Per-class Dirichlet client proportions, shape (class_count, clients).

    Uses its own seed stream so callers can re-derive the exact draws that
    partition_dirichlet consumed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, 0xD1)))
    return rng.dirichlet(np.full(spec.clients, spec.alpha), size=class_count)


def _largest_remainder(targets: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(targets).astype(np.int64)
    leftover = total - int(base.sum())
    fractions = targets - base
    order = np.argsort(-fractions, kind="stable")
    base[order[:leftover]] += 1
    return base


def partition_dirichlet(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset across clients by per-class Dirichlet proportions.

    Each class's (shuffled) examples are divided by largest-remainder
    rounding of the drawn proportions. The cells are disjoint and cover the
    dataset; a client that would end up empty receives one example moved
    from the largest cell.
    """
    counts = np.bincount(data.labels, minlength=data.class_count)
    if counts.min() < spec.clients:
        raise ValueError(
            f"every class needs at least {spec.clients} examples, "
            f"smallest class has {int(counts.min())}"
        )
    props = class_proportions(spec, data.class_count)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, 0xD2)))

    cells: list[list[np.ndarray]] = [[] for _ in range(spec.clients)]
    for cls in range(data.class_count):
        idx = shuffle_rng.permutation(np.nonzero(data.labels == cls)[0])
        sizes = _largest_remainder(props[cls] * len(idx), len(idx))
        cuts = np.cumsum(sizes)[:-1]
        for client, chunk in enumerate(np.split(idx, cuts)):
            cells[client].append(chunk)
    merged = [
        np.concatenate(chunks) if chunks else np.array([], dtype=np.int64)
        for chunks in cells
    ]
    # Weighted aggregation needs n_k >= 1 for every participant.
    while any(len(c) == 0 for c in merged):
        empty = next(i for i, c in enumerate(merged) if len(c) == 0)
        donor = int(np.argmax([len(c) for c in merged]))
        merged[empty] = merged[donor][-1:]
        merged[donor] = merged[donor][:-1]
    return [data.subset(cell) for cell in merged]


def load_csv(path) -> Dataset:
    """Parse a dataset file: header row, float feature columns, one "label" column.

    Labels are mapped to contiguous class indices in order of first
    appearance. Ragged rows and non-finite features fail with the line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise CsvFormatError(f"{path}: header has no 'label' column: {header}")
        label_col = header.index("label")
        feature_cols = [i for i in range(len(header)) if i != label_col]

        rows: list[list[float]] = []
        labels_raw: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            feats = []
            for i in feature_cols:
                try:
                    val = float(row[i])
                except ValueError:
                    raise CsvFormatError(
                        f"{path}:{lineno}: non-numeric feature {row[i]!r} "
                        f"in column {header[i]!r}"
                    ) from None
                if not np.isfinite(val):
                    raise CsvFormatError(
                        f"{path}:{lineno}: non-finite feature {row[i]!r} "
                        f"in column {header[i]!r}"
                    )
                feats.append(val)
            rows.append(feats)
            labels_raw.append(row[label_col].strip())

    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    mapping: dict[str, int] = {}
    labels = np.empty(len(labels_raw), dtype=np.int64)
    for i, token in enumerate(labels_raw):
        if token not in mapping:
            mapping[token] = len(mapping)
        labels[i] = mapping[token]
    return Dataset(
        features=np.array(rows, dtype=np.float64),
        labels=labels,
        class_count=len(mapping),
    )


def save_csv(data: Dataset, path) -> None:
    """Write a dataset with full float64 text precision (repr round-trips)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(data.feature_dim)] + ["label"])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
