"""Evaluation harness and command-line interface.

Subcommands:
  corrupt  -- apply label noise / imbalance to a dataset directory
  train    -- run a training method and persist a run directory
  eval     -- clean/robust accuracy of a saved checkpoint
  report   -- aggregate a run (or corruption) directory to csv/json

Exit codes: 0 success, 1 usage error, 2 runtime error. ``OAT_THREADS`` caps
evaluation parallelism; 0 (default) is the sequential deterministic mode.
Per-batch attack seeds depend only on the batch index, so thread count never
changes results.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adversary import AttackSpec, pgd_attack
from .corruption import ClassCounts, CorruptionSpec, corrupt
from .dataio import LabeledDataset, load_dataset, save_dataset
from .models import ModelParams, load_model
from .oracle import predict_probs
from .rng import SplitMix64
from .trainer import LabelDistribution, TrainConfig, train


@dataclass
class MetricsRecord:
    clean_accuracy: float
    robust_accuracy: dict[str, float]
    epoch: int = -1
    refurbished_nr: float | None = None
    dist_l1_prior: float | None = None
    dist_l1_estimated: float | None = None

    def __post_init__(self):
        for name, ra in self.robust_accuracy.items():
            if ra > self.clean_accuracy + 1e-12:
                raise ValueError(
                    f"robust accuracy under {name} ({ra}) exceeds clean accuracy "
                    f"({self.clean_accuracy})")

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": dict(self.robust_accuracy),
            "epoch": self.epoch,
            "refurbished_nr": self.refurbished_nr,
            "dist_l1_prior": self.dist_l1_prior,
            "dist_l1_estimated": self.dist_l1_estimated,
        }


def _eval_threads() -> int:
    return int(os.environ.get("OAT_THREADS", "0"))


def evaluate(model: ModelParams, test: LabeledDataset,
             attacks: list[AttackSpec], seed: int = 0,
             batch_size: int = 256,
             adjustment: LabelDistribution | None = None) -> MetricsRecord:
    """Clean accuracy plus robust accuracy per attack.

    Test-time predictions use raw logits by default; ``adjustment`` shifts
    them by the log class prior instead (experimentation flag, not used by
    the standard metrics). A sample counts as robust only if it is classified
    correctly both clean and attacked, so robust accuracy can never exceed
    clean accuracy.
    """
    if test.gt_labels is None:
        raise ValueError("evaluation requires gt_labels")
    labels = test.gt_labels
    starts = list(range(0, len(test), batch_size))
    shift = None if adjustment is None else np.log(adjustment.smoothed)

    def predict(x: np.ndarray) -> np.ndarray:
        probs = predict_probs(model, x)
        scores = np.log(np.maximum(probs, 1e-300)) + shift if shift is not None else probs
        return scores.argmax(axis=1)

    def clean_batch(i: int) -> np.ndarray:
        s = starts[i]
        x = test.samples[s:s + batch_size]
        return predict(x) == labels[s:s + batch_size]

    clean_ok = np.concatenate(_map_batches(clean_batch, len(starts)))
    ca = float(np.mean(clean_ok))

    ra: dict[str, float] = {}
    for attack in attacks:
        rng = SplitMix64(seed).fork("evaluate." + attack.name())

        def adv_batch(i: int, attack=attack, rng=rng) -> np.ndarray:
            s = starts[i]
            x = test.samples[s:s + batch_size]
            y = labels[s:s + batch_size]
            adv = pgd_attack(model, x, y, attack, rng.fork("batch", i))
            return predict(adv) == y

        adv_ok = np.concatenate(_map_batches(adv_batch, len(starts)))
        ra[attack.name()] = float(np.mean(clean_ok & adv_ok))

    return MetricsRecord(clean_accuracy=ca, robust_accuracy=ra)


def _map_batches(fn, n: int) -> list:
    threads = _eval_threads()
    if threads <= 0 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def distribution_error(estimated, reference) -> float:
    """Total-variation distance between two count vectors, in [0, 1]."""
    est = np.asarray(estimated.counts if isinstance(estimated, (LabelDistribution, ClassCounts))
                     else estimated, dtype=np.float64)
    ref = np.asarray(reference.counts if isinstance(reference, (LabelDistribution, ClassCounts))
                     else reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"count vectors differ in length: {est.shape} vs {ref.shape}")
    if est.sum() <= 0 or ref.sum() <= 0:
        raise ValueError("count vectors must have positive totals")
    return float(0.5 * np.abs(est / est.sum() - ref / ref.sum()).sum())


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for runtime errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="oat")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="apply label noise and imbalance")
    p.add_argument("--input", required=True)
    p.add_argument("--noise", choices=["symmetric", "asymmetric", "none"], default="none")
    p.add_argument("--nr", type=float, default=0.0)
    p.add_argument("--ir", type=float, default=1.0)
    p.add_argument("--pairs", default="", help="asymmetric pairs, e.g. 0:1,2:3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--method", choices=["oat", "pgd-at"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", choices=["pgd20", "pgd100", "cw100", "none"], default="pgd20")
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the metrics record to this file")

    p = sub.add_parser("report", help="aggregate a run or corruption directory")
    p.add_argument("--run", required=True)
    p.add_argument("--emit", choices=["csv", "json"], default="json")
    return parser


def _parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    if not text:
        return ()
    pairs = []
    for item in text.split(","):
        src, dst = item.split(":")
        pairs.append((int(src), int(dst)))
    return tuple(pairs)


def _cmd_corrupt(args) -> int:
    ds = load_dataset(args.input)
    spec = CorruptionSpec(noise_type=args.noise, target_nr=args.nr, target_ir=args.ir,
                          asym_pairs=_parse_pairs(args.pairs), seed=args.seed)
    out, provenance = corrupt(ds, spec)
    save_dataset(out, args.output)
    (Path(args.output) / "corruption.json").write_text(
        json.dumps(provenance, indent=2) + "\n")
    print(json.dumps(provenance))
    return 0


def _cmd_train(args) -> int:
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    if args.method:
        overrides["method"] = args.method.replace("-", "_")
    config = TrainConfig.from_dict(overrides)
    ds = load_dataset(args.data)
    test = load_dataset(args.test)
    state = train(config, ds, test, args.out)
    print(json.dumps({"best_epoch": state.best_epoch,
                      "best_robust_accuracy": state.best_robust,
                      "out": str(args.out)}))
    return 0


_EVAL_ATTACKS = {
    "pgd20": ("cross_entropy", 20),
    "pgd100": ("cross_entropy", 100),
    "cw100": ("cw_margin", 100),
}


def _cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    test = load_dataset(args.data)
    attacks = []
    if args.attack != "none":
        loss_kind, steps = _EVAL_ATTACKS[args.attack]
        attacks.append(AttackSpec(epsilon=args.eps, alpha=args.eps / 4, steps=steps,
                                  loss_kind=loss_kind))
    record = evaluate(model, test, attacks, seed=args.seed)
    payload = json.dumps(record.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
    print(payload, end="")
    return 0


def _round2(x):
    return None if x is None else round(x, 2)


def _cmd_report(args) -> int:
    run = Path(args.run)
    report: dict = {}

    provenance_file = run / "corruption.json"
    if provenance_file.exists():
        report["provenance"] = json.loads(provenance_file.read_text())

    metrics_file = run / "metrics.jsonl"
    epochs = []
    if metrics_file.exists():
        for line in metrics_file.read_text().splitlines():
            rec = json.loads(line)
            if "error" in rec:
                epochs.append({"epoch": rec.get("epoch"), "error": rec["error"]})
                continue
            row = {
                "epoch": rec["epoch"],
                "clean_accuracy": _round2(rec["clean_accuracy"]),
                "refurbished_nr": _round2(rec.get("refurbished_nr")),
                "dist_l1_prior": _round2(rec.get("dist_l1_prior")),
                "dist_l1_estimated": _round2(rec.get("dist_l1_estimated")),
            }
            for name, ra in rec["robust_accuracy"].items():
                row[f"robust_{name}"] = _round2(ra)
            epochs.append(row)
        report["epochs"] = epochs

    for name in ("summary.json",):
        f = run / name
        if f.exists():
            report["summary"] = json.loads(f.read_text())

    dist_files = sorted(run.glob("distribution_epoch_*.csv"),
                        key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if dist_files:
        last = dist_files[-1]
        with open(last, newline="") as f:
            rows = list(csv.DictReader(f))
        estimated_total = sum(int(r["estimated_count"]) for r in rows)
        report["distribution"] = {
            "epoch": int(last.stem.rsplit("_", 1)[1]),
            "rows": rows,
            "estimated_total": estimated_total,
        }

    if not report:
        raise FileNotFoundError(f"nothing to report under {run}")

    if args.emit == "json":
        print(json.dumps(report, indent=2))
    else:
        writer = csv.writer(sys.stdout)
        if "provenance" in report:
            prov = report["provenance"]
            writer.writerow(sorted(prov))
            writer.writerow([prov[k] for k in sorted(prov)])
        if epochs:
            fields = sorted({k for row in epochs for k in row})
            writer.writerow(fields)
            for row in epochs:
                writer.writerow([row.get(k, "") for k in fields])
    return 0


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"corrupt": _cmd_corrupt, "train": _cmd_train,
                "eval": _cmd_eval, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except Exception as err:  # runtime failures map to exit 2
        print(f"oat: error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
