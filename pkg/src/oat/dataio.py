"""Dataset loading, synthesis and persistence.

A dataset is a frozen bundle of float feature vectors in [0,1]^d, observed
class labels, optional hidden ground-truth labels (kept only for metrics),
and stable per-sample ids. Persistence uses a plain directory with
``meta.json`` + ``samples.csv`` + ``labels.csv`` so round trips are lossless
and diffable.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import SplitMix64

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray          # (n, d) float64 in [0, 1]
    observed_labels: np.ndarray  # (n,) int64 in [0, C)
    gt_labels: np.ndarray | None
    num_classes: int
    ids: np.ndarray              # (n,) int64, stable identifiers

    def __post_init__(self):
        n = len(self.samples)
        if len(self.observed_labels) != n or len(self.ids) != n:
            raise ValueError("samples, observed_labels and ids must have equal length")
        if self.gt_labels is not None and len(self.gt_labels) != n:
            raise ValueError("gt_labels length mismatch")
        for name, labels in (("observed", self.observed_labels), ("gt", self.gt_labels)):
            if labels is not None and len(labels) and (
                    labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        if len(self.samples) and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValueError("sample values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def with_observed(self, labels: np.ndarray) -> "LabeledDataset":
        return replace(self, observed_labels=np.asarray(labels, dtype=np.int64))


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    dim: int
    per_class: int
    cluster_spread: float
    seed: int

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")


def class_means(num_classes: int, dim: int) -> np.ndarray:
    """Cluster centers on a grid inside [0.2, 0.8]^d, pairwise distinct.

    Coordinate 0 spaces classes linearly (guarantees distinctness for any C);
    the remaining coordinates place each class on a binary corner of the box
    so separation grows with dim.
    """
    means = np.full((num_classes, dim), 0.2)
    if num_classes > 1:
        means[:, 0] = 0.2 + 0.6 * np.arange(num_classes) / (num_classes - 1)
    for c in range(num_classes):
        for j in range(1, dim):
            if (c >> (j - 1)) & 1:
                means[c, j] = 0.8
    return means


def gen_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Isotropic Gaussian clusters, clipped to [0,1]^d, labels = cluster id."""
    rng = SplitMix64(spec.seed).fork("gen_synthetic")
    means = class_means(spec.num_classes, spec.dim)
    n = spec.num_classes * spec.per_class
    noise = rng.normal(n * spec.dim).reshape(n, spec.dim) * spec.cluster_spread
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    samples = np.clip(means[labels] + noise, 0.0, 1.0)
    return LabeledDataset(
        samples=samples,
        observed_labels=labels.astype(np.int64),
        gt_labels=labels.astype(np.int64).copy(),
        num_classes=spec.num_classes,
        ids=np.arange(n, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# IDX (MNIST-style) loading
# ---------------------------------------------------------------------------

def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated IDX file while reading {what}")
    return buf


def load_idx(image_path: str | Path, label_path: str | Path) -> LabeledDataset:
    """Load an IDX image/label pair; pixels scaled to [0,1], labels trusted as gt."""
    with open(image_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, "pixel data"), dtype=np.uint8)
    with open(label_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, "label data"), dtype=np.uint8)
    if label_count != count:
        raise ValueError(f"image/label count mismatch: {count} images vs {label_count} labels")
    samples = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    observed = labels.astype(np.int64)
    num_classes = int(observed.max()) + 1 if count else 1
    return LabeledDataset(
        samples=samples,
        observed_labels=observed,
        gt_labels=observed.copy(),
        num_classes=num_classes,
        ids=np.arange(count, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# directory persistence
# ---------------------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write meta.json, samples.csv and labels.csv; round trip is lossless."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": 1,
        "num_classes": ds.num_classes,
        "dim": ds.dim,
        "count": len(ds),
        "has_gt": ds.gt_labels is not None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(path / "samples.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id"] + [f"f{j}" for j in range(ds.dim)])
        for i in range(len(ds)):
            # repr round-trips float64 exactly
            writer.writerow([int(ds.ids[i])] + [repr(float(v)) for v in ds.samples[i]])
    with open(path / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        header = ["id", "observed_label"] + (["gt_label"] if ds.gt_labels is not None else [])
        writer.writerow(header)
        for i in range(len(ds)):
            row = [int(ds.ids[i]), int(ds.observed_labels[i])]
            if ds.gt_labels is not None:
                row.append(int(ds.gt_labels[i]))
            writer.writerow(row)


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.exists():
        raise FileNotFoundError(f"no meta.json under {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("version") != 1:
        raise ValueError(f"unsupported dataset version {meta.get('version')!r}")
    count, dim = meta["count"], meta["dim"]

    samples = np.zeros((count, dim))
    ids = np.zeros(count, dtype=np.int64)
    with open(path / "samples.csv", newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for i, row in enumerate(reader):
            ids[i] = int(row[0])
            samples[i] = [float(v) for v in row[1:]]

    labels_file = path / "labels.csv"
    if not labels_file.exists():
        raise FileNotFoundError(f"no labels.csv under {path}")
    observed = np.zeros(count, dtype=np.int64)
    gt = np.zeros(count, dtype=np.int64) if meta["has_gt"] else None
    with open(labels_file, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for i, row in enumerate(reader):
            observed[i] = int(row[1])
            if gt is not None:
                gt[i] = int(row[2])

    return LabeledDataset(
        samples=samples,
        observed_labels=observed,
        gt_labels=gt,
        num_classes=meta["num_classes"],
        ids=ids,
    )
