"""Small MLP classifiers built on the autodiff engine.

Two roles share one architecture: the oracle carries a projector and a
predictor head (two one-hidden-layer MLPs) on top of its feature encoder for
contrastive training; the robust model carries only encoder + classifier.
Both encoders must share feature_dim so the oracle's projector can score the
robust model's features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .rng import SplitMix64

ORACLE = "oracle"
AT_MODEL = "at_model"


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    encoder_widths: tuple[int, ...]
    feature_dim: int
    num_classes: int
    projector_hidden: int = 256
    projector_out: int = 128
    predictor_hidden: int = 256
    predictor_out: int = 128

    def __post_init__(self):
        if self.projector_out != self.predictor_out:
            raise ValueError("projector_out and predictor_out must match (cosine compares them)")

    def parameter_count(self, role: str) -> int:
        """Closed-form parameter count for a given role."""
        dims = [self.input_dim, *self.encoder_widths, self.feature_dim]
        total = sum(a * b + b for a, b in zip(dims, dims[1:]))
        total += self.feature_dim * self.num_classes + self.num_classes
        if role == ORACLE:
            total += (self.feature_dim * self.projector_hidden + self.projector_hidden
                      + self.projector_hidden * self.projector_out + self.projector_out)
            total += (self.projector_out * self.predictor_hidden + self.predictor_hidden
                      + self.predictor_hidden * self.predictor_out + self.predictor_out)
        return total


Layer = tuple[Value, Value]  # (weight, bias)


@dataclass
class ModelParams:
    arch: ArchSpec
    role: str
    encoder: list[Layer]
    head: Layer
    projector: list[Layer] | None
    predictor: list[Layer] | None

    def parameters(self) -> list[Value]:
        out: list[Value] = []
        for w, b in self.encoder:
            out += [w, b]
        out += [self.head[0], self.head[1]]
        for block in (self.projector, self.predictor):
            if block is not None:
                for w, b in block:
                    out += [w, b]
        return out

    def named_buffers(self) -> list[tuple[str, Value]]:
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out += [(f"encoder.{i}.w", w), (f"encoder.{i}.b", b)]
        out += [("head.w", self.head[0]), ("head.b", self.head[1])]
        for name, block in (("projector", self.projector), ("predictor", self.predictor)):
            if block is not None:
                for i, (w, b) in enumerate(block):
                    out += [(f"{name}.{i}.w", w), (f"{name}.{i}.b", b)]
        return out


def _linear_init(rng: SplitMix64, fan_in: int, fan_out: int) -> Layer:
    # uniform fan-in scaling, same bound for weight and bias
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform_range(fan_in * fan_out, -bound, bound).reshape(fan_in, fan_out)
    b = rng.uniform_range(fan_out, -bound, bound)
    return Value(w, requires_grad=True), Value(b, requires_grad=True)


def init_model(spec: ArchSpec, role: str, seed: int) -> ModelParams:
    """Build parameters for the requested role; deterministic given seed."""
    if role not in (ORACLE, AT_MODEL):
        raise ValueError(f"unknown role {role!r}")
    rng = SplitMix64(seed).fork(f"init.{role}")
    dims = [spec.input_dim, *spec.encoder_widths, spec.feature_dim]
    encoder = [_linear_init(rng, a, b) for a, b in zip(dims, dims[1:])]
    head = _linear_init(rng, spec.feature_dim, spec.num_classes)
    projector = predictor = None
    if role == ORACLE:
        projector = [
            _linear_init(rng, spec.feature_dim, spec.projector_hidden),
            _linear_init(rng, spec.projector_hidden, spec.projector_out),
        ]
        predictor = [
            _linear_init(rng, spec.projector_out, spec.predictor_hidden),
            _linear_init(rng, spec.predictor_hidden, spec.predictor_out),
        ]
    return ModelParams(arch=spec, role=role, encoder=encoder,
                       head=head, projector=projector, predictor=predictor)


def _affine(x: Value, layer: Layer) -> Value:
    return ad.add(ad.matmul(x, layer[0]), layer[1])


def forward_features(params: ModelParams, x) -> Value:
    """Encoder output (batch x feature_dim): ReLU after hidden layers, linear out."""
    v = ad.as_value(x)
    if v.data.ndim != 2 or v.data.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected batch of shape (B, {params.arch.input_dim}), got {v.shape}")
    for layer in params.encoder[:-1]:
        v = ad.relu(_affine(v, layer))
    return _affine(v, params.encoder[-1])


def forward_logits(params: ModelParams, x) -> Value:
    """Classifier logits (batch x C)."""
    return _affine(forward_features(params, x), params.head)


def _mlp2(x: Value, block: list[Layer]) -> Value:
    return _affine(ad.relu(_affine(x, block[0])), block[1])


def project_predict(params: ModelParams, feats: Value, use_predictor: bool) -> Value:
    """Projector output, optionally pushed through the predictor as well."""
    if params.projector is None:
        raise ValueError(f"{params.role} params have no projector")
    out = _mlp2(ad.as_value(feats), params.projector)
    if use_predictor:
        if params.predictor is None:
            raise ValueError(f"{params.role} params have no predictor")
        out = _mlp2(out, params.predictor)
    return out


def frozen_heads(params: ModelParams) -> ModelParams:
    """Copy of an oracle's params whose projector/predictor are constants.

    Shares the underlying buffers, so later optimizer updates to the oracle
    are visible, but no gradient ever reaches the oracle through this view.
    """
    if params.projector is None or params.predictor is None:
        raise ValueError("frozen_heads requires oracle params")
    freeze = lambda block: [(ad.detach(w), ad.detach(b)) for w, b in block]
    return ModelParams(arch=params.arch, role=params.role,
                       encoder=[], head=(ad.detach(params.head[0]), ad.detach(params.head[1])),
                       projector=freeze(params.projector), predictor=freeze(params.predictor))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_model(params: ModelParams, path: str | Path) -> None:
    """Write checkpoint.json (manifest) + params.bin (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "version": CHECKPOINT_VERSION,
        "role": params.role,
        "arch": {
            "input_dim": params.arch.input_dim,
            "encoder_widths": list(params.arch.encoder_widths),
            "feature_dim": params.arch.feature_dim,
            "num_classes": params.arch.num_classes,
            "projector_hidden": params.arch.projector_hidden,
            "projector_out": params.arch.projector_out,
            "predictor_hidden": params.arch.predictor_hidden,
            "predictor_out": params.arch.predictor_out,
        },
        "buffers": [],
    }
    blob = bytearray()
    for name, value in params.named_buffers():
        raw = np.ascontiguousarray(value.data, dtype="<f8").tobytes()
        manifest["buffers"].append({
            "name": name,
            "shape": list(value.data.shape),
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob += raw
    (path / "params.bin").write_bytes(bytes(blob))
    (path / "checkpoint.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(path: str | Path) -> ModelParams:
    path = Path(path)
    manifest = json.loads((path / "checkpoint.json").read_text())
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['version']}")
    arch = ArchSpec(
        input_dim=manifest["arch"]["input_dim"],
        encoder_widths=tuple(manifest["arch"]["encoder_widths"]),
        feature_dim=manifest["arch"]["feature_dim"],
        num_classes=manifest["arch"]["num_classes"],
        projector_hidden=manifest["arch"]["projector_hidden"],
        projector_out=manifest["arch"]["projector_out"],
        predictor_hidden=manifest["arch"]["predictor_hidden"],
        predictor_out=manifest["arch"]["predictor_out"],
    )
    blob = (path / "params.bin").read_bytes()
    buffers: dict[str, Value] = {}
    for entry in manifest["buffers"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        buffers[entry["name"]] = Value(arr, requires_grad=True)

    def layer(prefix: str) -> Layer:
        return buffers[f"{prefix}.w"], buffers[f"{prefix}.b"]

    n_enc = len(arch.encoder_widths) + 1
    encoder = [layer(f"encoder.{i}") for i in range(n_enc)]
    projector = predictor = None
    if manifest["role"] == ORACLE:
        projector = [layer("projector.0"), layer("projector.1")]
        predictor = [layer("predictor.0"), layer("predictor.1")]
    return ModelParams(arch=arch, role=manifest["role"], encoder=encoder,
                       head=layer("head"), projector=projector, predictor=predictor)
