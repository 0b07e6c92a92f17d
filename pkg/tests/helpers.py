"""Shared test utilities: finite-difference gradients, brute-force k-NN,
and small fixture builders."""

from __future__ import annotations

import numpy as np

from oat import autodiff as ad
from oat.dataio import LabeledDataset
from oat.models import ArchSpec
from oat.rng import SplitMix64

TINY_ARCH = ArchSpec(input_dim=5, encoder_widths=(7,), feature_dim=6, num_classes=3,
                     projector_hidden=8, projector_out=4,
                     predictor_hidden=8, predictor_out=4)


def fd_max_rel_error(loss_fn, params, h: float = 1e-5, coords_per_tensor: int = 6,
                     rng: SplitMix64 | None = None) -> float:
    """Max relative error between autodiff and central differences.

    Checks a deterministic subsample of coordinates from every parameter
    tensor (all coordinates when the tensor is small enough).
    """
    for p in params:
        p.grad[...] = 0.0
    ad.backward(loss_fn())
    worst = 0.0
    rng = rng or SplitMix64(0).fork("fd")
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        if flat.size <= coords_per_tensor:
            coords = range(flat.size)
        else:
            coords = sorted({rng.randint(flat.size) for _ in range(coords_per_tensor)})
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, abs(gflat[i] - fd) / max(1.0, abs(fd)))
    for p in params:
        p.grad[...] = 0.0
    return worst


def brute_force_knn_majority(points: np.ndarray, labels: np.ndarray, k: int,
                             num_classes: int) -> np.ndarray:
    """Exhaustive per-query reference: direct distances, full stable sort,
    self excluded, majority with lowest-class tie break."""
    n = len(points)
    majority = np.zeros(n, dtype=np.int64)
    for i in range(n):
        d = ((points - points[i]) ** 2).sum(axis=1)
        order = [j for j in np.argsort(d, kind="stable") if j != i][:k]
        counts = np.bincount(labels[order], minlength=num_classes)
        majority[i] = int(np.argmax(counts))
    return majority


def tiny_dataset(n_per_class: int = 6, num_classes: int = 3, dim: int = 4,
                 seed: int = 0) -> LabeledDataset:
    rng = SplitMix64(seed).fork("tiny_dataset")
    means = np.linspace(0.2, 0.8, num_classes)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    samples = np.clip(
        means[labels][:, None] + 0.02 * rng.normal(len(labels) * dim).reshape(-1, dim),
        0.0, 1.0)
    return LabeledDataset(samples=samples, observed_labels=labels.astype(np.int64),
                          gt_labels=labels.astype(np.int64).copy(),
                          num_classes=num_classes,
                          ids=np.arange(len(labels), dtype=np.int64))
