"""L-infinity PGD adversarial example generation.

The attack maximizes either cross-entropy or a CW margin over an epsilon ball
intersected with the [0,1] input box. When a class-count prior is attached,
the loss is computed on shifted logits; the shift vector is normalized by its
maximum so a uniform prior is exactly the zero vector and the attack output
is bit-identical to the unadjusted path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .models import ModelParams, forward_logits
from .rng import SplitMix64

_MASK_NEG = -1e18  # dominates any finite logit without leaving double range


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    alpha: float
    steps: int
    loss_kind: str = "cross_entropy"   # or "cw_margin"
    adjustment: tuple[float, ...] | None = None  # per-class counts, all >= 1
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.alpha > self.epsilon:
            raise ValueError("alpha must not exceed epsilon")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss_kind not in ("cross_entropy", "cw_margin"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if self.adjustment is not None and any(c <= 0 for c in self.adjustment):
            raise ValueError("adjustment counts must be positive (smooth zeros first)")

    def name(self) -> str:
        return ("pgd" if self.loss_kind == "cross_entropy" else "cw") + str(self.steps)


def cw_margin_loss(logits: Value, y: np.ndarray) -> Value:
    """Mean over the batch of (max_{j != y} z_j - z_y); logits are (B, C)."""
    logits = ad.as_value(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"cw_margin_loss expects (B, C) logits, got {logits.shape}")
    if logits.data.shape[-1] < 2:
        raise ValueError("cw_margin_loss needs at least 2 classes")
    y = np.asarray(y, dtype=np.int64)
    mask = np.zeros(logits.data.shape)
    mask[np.arange(len(y)), y] = _MASK_NEG
    other_max = ad.max_rows(ad.add(logits, Value(mask)))
    true_logit = ad.gather_rows(logits, y)
    return ad.vmean(ad.sub(other_max, true_logit))


def _attack_objective(model: ModelParams, xv: Value, y: np.ndarray,
                      spec: AttackSpec) -> Value:
    logits = forward_logits(model, xv)
    if spec.adjustment is not None:
        shift = np.log(np.asarray(spec.adjustment, dtype=np.float64))
        # max-normalize: constant shifts cancel in both losses, and a uniform
        # prior becomes the exact zero vector (bitwise no-op)
        logits = ad.add(logits, Value(shift - shift.max()))
    if spec.loss_kind == "cw_margin":
        return cw_margin_loss(logits, y)
    return ad.cross_entropy(logits, y)


def pgd_attack(model: ModelParams, x: np.ndarray, y: np.ndarray,
               spec: AttackSpec, rng: SplitMix64 | None = None) -> np.ndarray:
    """Iterative sign-gradient ascent projected onto the eps ball and [0,1] box."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) and (y.min() < 0 or y.max() >= model.arch.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    if rng is None:
        rng = SplitMix64(0).fork("pgd_attack")

    if spec.random_start:
        start = rng.uniform_range(x.size, -spec.epsilon, spec.epsilon).reshape(x.shape)
        adv = np.clip(x + start, 0.0, 1.0)
    else:
        adv = x.copy()

    for _ in range(spec.steps):
        xv = Value(adv, requires_grad=True)
        loss = _attack_objective(model, xv, y, spec)
        ad.backward(loss)
        adv = adv + spec.alpha * np.sign(xv.grad)  # sign(0) == 0
        adv = x + np.clip(adv - x, -spec.epsilon, spec.epsilon)
        adv = np.clip(adv, 0.0, 1.0)
    return adv
