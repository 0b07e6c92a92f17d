"""The full training loop: alternating oracle and adversarial-training epochs,
label-distribution estimation, logits adjustment, soft-label training, and
the plain PGD-AT baseline.

Every run writes a self-contained directory: config.json, metrics.jsonl (one
record per epoch), per-epoch label-distribution CSVs, and best/ + last/
checkpoints. "Best" is the epoch with the highest PGD-20 robust accuracy on
the test set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adversary import AttackSpec, pgd_attack
from .autodiff import SgdOptimizer, Value
from .corruption import balanced_oversample, class_counts
from .dataio import LabeledDataset
from .models import (AT_MODEL, ORACLE, ArchSpec, ModelParams, forward_features,
                     forward_logits, frozen_heads, init_model, project_predict,
                     save_model)
from .oracle import (AugmentationPolicy, SplitSets, embed, oracle_epoch,
                     predict_probs)
from .rng import SplitMix64


@dataclass(frozen=True)
class LabelDistribution:
    """Estimated per-class sample counts; smoothed entries are >= 1 so the
    log prior is always defined."""
    counts: tuple[int, ...]

    @property
    def smoothed(self) -> np.ndarray:
        return np.maximum(np.asarray(self.counts, dtype=np.float64), 1.0)

    def total(self) -> int:
        return int(sum(self.counts))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = (30, 45)
    lr_decay_factor: float = 0.1
    theta_r: float = 0.8
    k: int = 200
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(
        epsilon=8 / 255, alpha=2 / 255, steps=10))
    method: str = "oat"                 # or "pgd_at"
    interaction_enabled: bool = True
    adjustment_enabled: bool = True
    seed: int = 0
    # architecture / loop knobs
    encoder_widths: tuple[int, ...] = (64,)
    feature_dim: int = 32
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    eval_steps: int = 20                # PGD steps for per-epoch robust accuracy
    label_dist_interval: int = 1        # epochs between distribution refreshes
    refurbish_against_original: bool = False

    def __post_init__(self):
        if self.method not in ("oat", "pgd_at"):
            raise ValueError(f"unknown method {self.method!r}")
        if any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError("lr_decay_epochs must all be < epochs")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError("lr_decay_epochs must be strictly increasing")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack"] = dataclasses.asdict(self.attack)
        d["augment"] = dataclasses.asdict(self.augment)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "attack" in d and isinstance(d["attack"], dict):
            a = dict(d["attack"])
            if a.get("adjustment") is not None:
                a["adjustment"] = tuple(a["adjustment"])
            d["attack"] = AttackSpec(**a)
        if "augment" in d and isinstance(d["augment"], dict):
            aug = dict(d["augment"])
            for key in ("weak", "strong"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentationPolicy(**aug)
        for key in ("lr_decay_epochs", "encoder_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return TrainConfig(**d)


@dataclass
class RunState:
    config: TrainConfig
    oracle: ModelParams | None
    model: ModelParams
    oversampled: LabeledDataset | None
    labels: np.ndarray | None          # working labels over the oversampled set
    rng: SplitMix64
    oracle_opt: SgdOptimizer | None = None
    model_opt: SgdOptimizer | None = None
    epoch: int = 0
    split: SplitSets | None = None
    distribution: LabelDistribution | None = None
    oracle_record: object = None
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_robust: float = -1.0
    best_snapshot: list | None = None
    run_dir: Path | None = None


# ---------------------------------------------------------------------------
# distribution estimation and logits adjustment
# ---------------------------------------------------------------------------

def estimate_label_distribution(oracle: ModelParams, ds: LabeledDataset) -> LabelDistribution:
    """Count the oracle's argmax predictions over the whole dataset."""
    predicted = predict_probs(oracle, ds.samples).argmax(axis=1)
    counts = np.bincount(predicted, minlength=ds.num_classes)
    return LabelDistribution(counts=tuple(int(c) for c in counts))


def adjust_logits(logits: Value, dist: LabelDistribution) -> Value:
    """Add the log class-count prior to every row of the logits."""
    return ad.add(ad.as_value(logits), Value(np.log(dist.smoothed)))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Robust-model learning rate: decayed at each listed epoch. (The oracle
    keeps config.lr for the whole run.)"""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    hits = sum(1 for d in config.lr_decay_epochs if epoch >= d)
    return config.lr * config.lr_decay_factor ** hits


# ---------------------------------------------------------------------------
# robust-model losses
# ---------------------------------------------------------------------------

def soft_label_loss(adjusted_logits: Value, soft_labels: np.ndarray) -> Value:
    """Cross-entropy of log-softmaxed logits against a soft target distribution."""
    n = adjusted_logits.data.shape[0]
    inner = ad.mul(ad.log_softmax(adjusted_logits), Value(soft_labels))
    return ad.neg(ad.scale(ad.vsum(inner), 1.0 / n))


def at_model_loss(at_model: ModelParams, oracle: ModelParams | None,
                  x: np.ndarray, x_adv: np.ndarray,
                  dist: LabelDistribution | None,
                  config: TrainConfig) -> tuple[Value, dict[str, float]]:
    """Soft-label cross-entropy on adversarial inputs, plus (when interaction
    is on) a cosine term pulling the robust model's adversarial features
    toward the oracle's clean-view embedding. The oracle contributes only
    constants: no gradient reaches it."""
    assert oracle is not None
    soft = predict_probs(oracle, x)
    logits = forward_logits(at_model, x_adv)
    if config.adjustment_enabled:
        assert dist is not None
        logits = adjust_logits(logits, dist)
    l_ce = soft_label_loss(logits, soft)
    parts = {"soft_ce": l_ce.item()}
    total = l_ce

    if config.interaction_enabled:
        heads = frozen_heads(oracle)
        with ad.no_grad():
            target_np = project_predict(oracle, forward_features(oracle, x), False).data
        online = project_predict(heads, forward_features(at_model, x_adv), True)
        l_cos = ad.neg(ad.vmean(ad.batch_cosine(Value(target_np), online)))
        parts["feature_align"] = l_cos.item()
        total = ad.add(total, l_cos)

    parts["model_total"] = total.item()
    return total, parts


def hard_label_loss(at_model: ModelParams, x_adv: np.ndarray,
                    labels: np.ndarray) -> tuple[Value, dict[str, float]]:
    """Plain cross-entropy on adversarial inputs (the PGD-AT baseline)."""
    loss = ad.cross_entropy(forward_logits(at_model, x_adv), labels)
    return loss, {"hard_ce": loss.item(), "model_total": loss.item()}


# ---------------------------------------------------------------------------
# evaluation used inside the loop (full harness lives in evalcli)
# ---------------------------------------------------------------------------

def accuracy(model: ModelParams, x: np.ndarray, labels: np.ndarray) -> float:
    predicted = predict_probs(model, x).argmax(axis=1)
    return float(np.mean(predicted == labels))


def robust_accuracy(model: ModelParams, ds: LabeledDataset, attack: AttackSpec,
                    rng: SplitMix64, batch_size: int = 256) -> float:
    """Fraction of test points that are correctly classified both clean and
    after the attack (an attacked sample can only lose correctness)."""
    assert ds.gt_labels is not None
    robust = 0
    for i, start in enumerate(range(0, len(ds), batch_size)):
        x = ds.samples[start:start + batch_size]
        y = ds.gt_labels[start:start + batch_size]
        clean_ok = predict_probs(model, x).argmax(axis=1) == y
        adv = pgd_attack(model, x, y, attack, rng.fork("batch", i))
        adv_ok = predict_probs(model, adv).argmax(axis=1) == y
        robust += int(np.sum(clean_ok & adv_ok))
    return robust / len(ds)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _snapshot(params: ModelParams) -> list[np.ndarray]:
    return [p.data.copy() for p in params.parameters()]


def _restore(params: ModelParams, snapshot: list[np.ndarray]) -> None:
    for p, data in zip(params.parameters(), snapshot):
        p.data[...] = data


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def _distribution_csv(path: Path, prior, estimated, gt) -> None:
    lines = ["class,prior_count,estimated_count,gt_count"]
    for c in range(len(prior)):
        gt_val = "" if gt is None else str(int(gt[c]))
        lines.append(f"{c},{int(prior[c])},{int(estimated[c])},{gt_val}")
    path.write_text("\n".join(lines) + "\n")


def _total_variation(a: np.ndarray, b: np.ndarray) -> float:
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    return float(0.5 * np.abs(pa / pa.sum() - pb / pb.sum()).sum())


def train(config: TrainConfig, ds: LabeledDataset, test: LabeledDataset,
          out_dir: str | Path) -> RunState:
    """Run the configured method and persist metrics plus best/last checkpoints."""
    if ds.dim != test.dim or ds.num_classes != test.num_classes:
        raise ValueError("train and test datasets must share dim and num_classes")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    arch = ArchSpec(input_dim=ds.dim, encoder_widths=config.encoder_widths,
                    feature_dim=config.feature_dim, num_classes=ds.num_classes)
    rng = SplitMix64(config.seed).fork("train")
    model = init_model(arch, AT_MODEL, seed=config.seed + 1)
    state = RunState(config=config, oracle=None, model=model, oversampled=None,
                     labels=None, rng=rng, run_dir=out_dir)
    state.model_opt = SgdOptimizer(model.parameters(), config.lr,
                                   config.momentum, config.weight_decay)

    if config.method == "oat":
        state.oracle = init_model(arch, ORACLE, seed=config.seed + 2)
        state.oracle_opt = SgdOptimizer(state.oracle.parameters(), config.lr,
                                        config.momentum, config.weight_decay)
        # built once per run; later epochs reuse the same balanced set
        state.oversampled = balanced_oversample(ds, seed=config.seed + 3)
        state.labels = state.oversampled.observed_labels.copy()

    prior_counts = np.asarray(class_counts(ds).counts)
    gt_counts = None if ds.gt_labels is None else \
        np.asarray(class_counts(ds, use_gt=True).counts)
    eval_attack = AttackSpec(epsilon=config.attack.epsilon, alpha=config.attack.alpha,
                             steps=config.eval_steps, loss_kind="cross_entropy")

    for epoch in range(config.epochs):
        state.epoch = epoch
        try:
            if config.method == "oat":
                if config.refurbish_against_original:
                    state.labels = state.oversampled.observed_labels.copy()
                oracle_epoch(state, config)
                if epoch % config.label_dist_interval == 0 or state.distribution is None:
                    state.distribution = estimate_label_distribution(state.oracle, ds)
            _at_epoch(state, ds, epoch)
        except FloatingPointError as err:
            _append_jsonl(metrics_path, {"epoch": epoch, "error": str(err)})
            raise RuntimeError(f"run aborted: {err}") from err

        record = _evaluate_epoch(state, test, eval_attack, prior_counts, gt_counts)
        state.records.append(record)
        _append_jsonl(metrics_path, record)
        if config.method == "oat":
            _distribution_csv(out_dir / f"distribution_epoch_{epoch}.csv",
                              prior_counts, state.distribution.counts, gt_counts)

        if record["robust_accuracy"]["pgd%d" % config.eval_steps] > state.best_robust:
            state.best_robust = record["robust_accuracy"]["pgd%d" % config.eval_steps]
            state.best_epoch = epoch
            state.best_snapshot = _snapshot(state.model)

    save_model(state.model, out_dir / "last")
    if state.best_snapshot is not None:
        current = _snapshot(state.model)
        _restore(state.model, state.best_snapshot)
        save_model(state.model, out_dir / "best")
        _restore(state.model, current)
    (out_dir / "summary.json").write_text(json.dumps({
        "best_epoch": state.best_epoch,
        "best_robust_accuracy": state.best_robust,
        "last_epoch": config.epochs - 1,
    }, indent=2) + "\n")
    return state


def _at_epoch(state: RunState, ds: LabeledDataset, epoch: int) -> None:
    config = state.config
    state.model_opt.learning_rate = lr_at_epoch(config, epoch)
    rng = state.rng.fork("at_epoch", epoch)
    order = rng.fork("shuffle").permutation(len(ds))

    sums: dict[str, float] = {}
    n_batches = 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        x = ds.samples[idx]
        attack_rng = rng.fork("attack", n_batches)

        if config.method == "oat":
            hard = predict_probs(state.oracle, x).argmax(axis=1)
            attack = config.attack
            if config.adjustment_enabled:
                attack = dataclasses.replace(
                    attack, adjustment=tuple(state.distribution.smoothed))
            x_adv = pgd_attack(state.model, x, hard, attack, attack_rng)
            loss, parts = at_model_loss(state.model, state.oracle, x, x_adv,
                                        state.distribution, config)
        else:
            labels = ds.observed_labels[idx]
            x_adv = pgd_attack(state.model, x, labels, config.attack, attack_rng)
            loss, parts = hard_label_loss(state.model, x_adv, labels)

        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite model loss at epoch {epoch}")
        ad.backward(loss)
        state.model_opt.step()
        for name, value in parts.items():
            sums[name] = sums.get(name, 0.0) + value
        n_batches += 1

    state.model_losses = {name: s / max(n_batches, 1) for name, s in sums.items()}


def _evaluate_epoch(state: RunState, test: LabeledDataset, eval_attack: AttackSpec,
                    prior_counts: np.ndarray, gt_counts: np.ndarray | None) -> dict:
    config = state.config
    assert test.gt_labels is not None
    ca = accuracy(state.model, test.samples, test.gt_labels)
    ra = robust_accuracy(state.model, test, eval_attack,
                         state.rng.fork("eval", state.epoch))

    losses = dict(getattr(state, "model_losses", {}))
    record: dict = {
        "epoch": state.epoch,
        "clean_accuracy": ca,
        "robust_accuracy": {eval_attack.name(): ra},
        "lr_model": lr_at_epoch(config, state.epoch),
        "lr_oracle": config.lr if config.method == "oat" else None,
        "adjustment_enabled": config.adjustment_enabled if config.method == "oat" else False,
    }
    if config.method == "oat":
        orec = state.oracle_record
        losses.update(orec.losses)
        record.update({
            "refurbished_nr": orec.refurbished_nr,
            "refurbished_count": orec.refurbished_count,
            "clean_count": orec.clean_count,
            "noisy_count": orec.noisy_count,
            "empty_clean_batches": orec.empty_clean_batches,
            "estimated_counts": list(state.distribution.counts),
        })
        if gt_counts is not None:
            record["dist_l1_prior"] = _total_variation(prior_counts, gt_counts)
            record["dist_l1_estimated"] = _total_variation(
                np.asarray(state.distribution.smoothed), gt_counts)
    record["losses"] = losses
    return record
