"""Oracle training: label refurbishment, k-NN clean/noisy split, and the
contrastive + supervised + divergence losses that drive one oracle epoch.

The oracle's job is to fit the training set's correct labeling, not to
generalize: it relabels samples it is confident about, votes with exact
k-nearest neighbors in its own feature space to decide which labels to trust,
and trains with a two-view stop-gradient cosine loss alongside cross-entropy
on the trusted subset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .dataio import LabeledDataset
from .models import ModelParams, forward_features, forward_logits, project_predict
from .rng import SplitMix64

if TYPE_CHECKING:  # pragma: no cover
    from .trainer import RunState, TrainConfig


@dataclass(frozen=True)
class RefurbishedLabels:
    labels: np.ndarray            # (n,) int64
    refurbished_mask: np.ndarray  # (n,) bool, True where the label was replaced


@dataclass(frozen=True)
class SplitSets:
    clean_idx: np.ndarray
    noisy_idx: np.ndarray


@dataclass(frozen=True)
class KnnIndex:
    """Read-only exact k-NN index; queries over the indexed points themselves
    never count a point as its own neighbor."""
    points: np.ndarray
    k: int

    def __post_init__(self):
        if self.k >= len(self.points):
            raise ValueError(f"k={self.k} must be smaller than n={len(self.points)}")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Two fixed augmentation menus over flat feature vectors in [0,1]^d.

    weak: jitter + flip. strong: jitter + flip + per-feature scaling jitter +
    random erasing. The knobs control amplitude; flip reverses the feature
    order, which only makes sense for data without coordinate semantics, so
    tabular configs usually set flip_prob to 0.
    """
    weak: tuple[str, ...] = ("jitter", "flip")
    strong: tuple[str, ...] = ("jitter", "flip", "scale_jitter", "erase")
    jitter_amp: float = 0.05
    flip_prob: float = 0.5
    scale_amp: float = 0.2
    erase_frac: float = 0.25
    erase_prob: float = 0.5

    def apply(self, x: np.ndarray, which: str, rng: SplitMix64) -> np.ndarray:
        ops = self.weak if which == "weak" else self.strong
        out = x.copy()
        n, d = out.shape
        for op in ops:
            if op == "jitter":
                out += rng.uniform_range(n * d, -self.jitter_amp, self.jitter_amp).reshape(n, d)
            elif op == "flip":
                flips = rng.uniform(n) < self.flip_prob
                out[flips] = out[flips, ::-1]
            elif op == "scale_jitter":
                out *= 1.0 + rng.uniform_range(n * d, -self.scale_amp, self.scale_amp).reshape(n, d)
            elif op == "erase":
                width = max(1, int(round(self.erase_frac * d)))
                hits = rng.uniform(n) < self.erase_prob
                starts = (rng.uniform(n) * max(1, d - width + 1)).astype(int)
                for i in np.flatnonzero(hits):
                    out[i, starts[i]:starts[i] + width] = 0.0
            else:
                raise ValueError(f"unknown augmentation op {op!r}")
        return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# refurbishment and splitting
# ---------------------------------------------------------------------------

def _batched_no_grad(fn, x: np.ndarray, batch: int = 512) -> np.ndarray:
    chunks = []
    with ad.no_grad():
        for start in range(0, len(x), batch):
            chunks.append(fn(x[start:start + batch]).data)
    return np.concatenate(chunks) if chunks else np.zeros((0,))


def predict_probs(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities without building a gradient graph."""
    return _batched_no_grad(lambda b: ad.softmax(forward_logits(params, b)), x)


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Encoder features without building a gradient graph."""
    return _batched_no_grad(lambda b: forward_features(params, b), x)


def refurbish(oracle: ModelParams, ds: LabeledDataset, theta_r: float) -> RefurbishedLabels:
    """Replace a label with the oracle argmax when max confidence >= theta_r."""
    if not 0.0 < theta_r <= 1.0:
        raise ValueError("theta_r must lie in (0, 1]")
    probs = predict_probs(oracle, ds.samples)
    confident = probs.max(axis=1) >= theta_r
    predicted = probs.argmax(axis=1)  # ties resolve to the lowest class index
    labels = np.where(confident, predicted, ds.observed_labels).astype(np.int64)
    replaced = confident & (predicted != ds.observed_labels)
    return RefurbishedLabels(labels=labels, refurbished_mask=replaced)


def knn_split(index: KnnIndex, feats: np.ndarray, labels: np.ndarray, k: int) -> SplitSets:
    """Partition samples by whether the k-NN majority label agrees with theirs.

    Distances are Euclidean; equal distances rank by lower sample index,
    majority ties resolve to the lower class index. When feats is the index's
    own point set, each query excludes itself.
    """
    if k >= len(index.points):
        raise ValueError(f"k={k} must be smaller than n={len(index.points)}")
    labels = np.asarray(labels, dtype=np.int64)
    self_query = feats is index.points or (
        feats.shape == index.points.shape and np.shares_memory(feats, index.points))

    pts = index.points
    pts_sq = (pts * pts).sum(axis=1)
    num_classes = int(labels.max()) + 1 if len(labels) else 1
    majority = np.zeros(len(feats), dtype=np.int64)

    chunk = 256
    for start in range(0, len(feats), chunk):
        q = feats[start:start + chunk]
        d2 = (q * q).sum(axis=1)[:, None] + pts_sq[None, :] - 2.0 * (q @ pts.T)
        if self_query:
            rows = np.arange(start, min(start + chunk, len(feats)))
            d2[np.arange(len(rows)), rows] = np.inf
        # stable sort: equal distances keep ascending index order
        neighbor = np.argsort(d2, axis=1, kind="stable")[:, :k]
        votes = labels[neighbor]
        for i in range(len(votes)):
            majority[start + i] = np.argmax(np.bincount(votes[i], minlength=num_classes))

    clean = majority == labels
    return SplitSets(clean_idx=np.flatnonzero(clean), noisy_idx=np.flatnonzero(~clean))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def oracle_contrastive_loss(oracle: ModelParams, batch: np.ndarray,
                            policy: AugmentationPolicy, rng: SplitMix64) -> Value:
    """Two-view cosine loss: stop-gradient on the projector-only weak view,
    gradient through the predictor branch of the strong view."""
    if len(batch) == 0:
        raise ValueError("contrastive loss needs a nonempty batch")
    view1 = policy.apply(batch, "weak", rng)
    view2 = policy.apply(batch, "strong", rng)
    target = ad.detach(project_predict(oracle, forward_features(oracle, view1), False))
    online = project_predict(oracle, forward_features(oracle, view2), True)
    return ad.neg(ad.vmean(ad.batch_cosine(target, online)))


def oracle_supervised_loss(oracle: ModelParams, clean_batch: np.ndarray,
                           labels: np.ndarray) -> Value:
    """Mean cross-entropy against the refurbished labels of the clean subset."""
    if len(clean_batch) == 0:
        raise ValueError("supervised loss needs a nonempty clean batch")
    return ad.cross_entropy(forward_logits(oracle, clean_batch), labels)


def oracle_interaction_loss(oracle: ModelParams, at_model: ModelParams,
                            clean_batch: np.ndarray) -> Value:
    """Negated MSE between the two models' softmax outputs; pushes the oracle
    away from the robust model's predictions. The robust model's branch is a
    constant here."""
    oracle_probs = ad.softmax(forward_logits(oracle, clean_batch))
    with ad.no_grad():
        model_probs = ad.softmax(forward_logits(at_model, clean_batch))
    return ad.neg(ad.mse(oracle_probs, ad.detach(model_probs)))


# ---------------------------------------------------------------------------
# one oracle epoch
# ---------------------------------------------------------------------------

@dataclass
class OracleEpochRecord:
    refurbished_nr: float | None
    refurbished_count: int
    clean_count: int
    noisy_count: int
    losses: dict = field(default_factory=dict)
    empty_clean_batches: int = 0


def oracle_epoch(state: "RunState", config: "TrainConfig") -> "RunState":
    """Refurbish labels, split clean/noisy by k-NN, run one SGD pass over the
    oversampled set. The oracle's learning rate stays at config.lr for the
    whole run."""
    ds = state.oversampled
    rng = state.rng.fork("oracle_epoch", state.epoch)

    working = ds.with_observed(state.labels)
    ref = refurbish(state.oracle, working, config.theta_r)
    state.labels = ref.labels

    feats = embed(state.oracle, ds.samples)
    k = max(1, min(config.k, len(ds) // 10, len(ds) - 1))
    split = knn_split(KnnIndex(points=feats, k=k), feats, ref.labels, k)
    state.split = split
    clean_mask = np.zeros(len(ds), dtype=bool)
    clean_mask[split.clean_idx] = True

    sums = {"contrastive": 0.0, "supervised": 0.0}
    if config.interaction_enabled:
        sums["divergence"] = 0.0
    total_sum = 0.0
    n_batches = 0
    empty_clean = 0

    order = rng.fork("shuffle").permutation(len(ds))
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        x = ds.samples[idx]
        terms: list[Value] = []

        l_cos = oracle_contrastive_loss(state.oracle, x, config.augment,
                                        rng.fork("augment", n_batches))
        terms.append(l_cos)
        sums["contrastive"] += l_cos.item()

        clean_in_batch = idx[clean_mask[idx]]
        if len(clean_in_batch):
            l_ce = oracle_supervised_loss(state.oracle, ds.samples[clean_in_batch],
                                          ref.labels[clean_in_batch])
            terms.append(l_ce)
            sums["supervised"] += l_ce.item()
            if config.interaction_enabled:
                l_div = oracle_interaction_loss(state.oracle, state.model,
                                                ds.samples[clean_in_batch])
                terms.append(l_div)
                sums["divergence"] += l_div.item()
        else:
            empty_clean += 1

        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        total_sum += total.item()
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"non-finite oracle loss at epoch {state.epoch}")
        ad.backward(total)
        state.oracle_opt.step()
        n_batches += 1

    losses = {name: s / max(n_batches, 1) for name, s in sums.items()}
    losses["oracle_total"] = total_sum / max(n_batches, 1)

    gt = ds.gt_labels
    record = OracleEpochRecord(
        refurbished_nr=None if gt is None else float(np.mean(ref.labels != gt)),
        refurbished_count=int(ref.refurbished_mask.sum()),
        clean_count=len(split.clean_idx),
        noisy_count=len(split.noisy_idx),
        losses=losses,
        empty_clean_batches=empty_clean,
    )
    state.oracle_record = record
    return state
