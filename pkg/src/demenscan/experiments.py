"""Canned end-to-end runs on a real corpus: the desk-scale check and the full protocol."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES, DatasetIndex, load_batch, scan_dataset, stratified_split
from .model import ModelSpec
from .training import REFERENCE_TARGETS, TrainConfig, evaluate, kfold_run, train

log = logging.getLogger(__name__)

DESK_CONFIG = TrainConfig(epochs=5, batch_size=32,
                          spec=ModelSpec(input_size=(32, 32, 3), filters=(8, 16, 32, 16)))
FULL_CONFIG = TrainConfig()


def cached_loader(index: DatasetIndex, spec: ModelSpec, limit_bytes: int = 2 << 30):
    """Decode the whole corpus once when it fits in ``limit_bytes``; else decode per batch."""
    c, h, w = spec.chw
    if len(index) * c * h * w * 4 > limit_bytes:
        return lambda samples: load_batch(samples, spec.input_size)
    images = load_batch(index.samples, spec.input_size)
    row = {s.path: i for i, s in enumerate(index.samples)}
    return lambda samples: images[[row[s.path] for s in samples]]


@dataclass
class RunReport:
    config: TrainConfig
    train_counts: list
    val_counts: list
    metrics: object
    val_per_class: list
    confusion: np.ndarray
    seconds: float
    majority_baseline: float
    kfold: object = None
    extras: dict = field(default_factory=dict)

    def lines(self) -> list:
        f = self.metrics.final
        out = [
            f"train counts {self.train_counts}  val counts {self.val_counts}",
            f"train acc {f.train_acc:.4f} loss {f.train_loss:.4f} | "
            f"val acc {f.val_acc:.4f} loss {f.val_loss:.4f}  ({self.seconds:.0f} s)",
            f"majority baseline {self.majority_baseline:.4f}; margin "
            f"{100 * (f.val_acc - self.majority_baseline):+.1f} points",
        ]
        for name, acc in zip(CLASS_NAMES, self.val_per_class):
            out.append(f"  {name:<17} {'n/a' if acc is None else f'{acc:.4f}'}")
        return out

    def reference_lines(self) -> list:
        f = self.metrics.final
        ref = REFERENCE_TARGETS
        per_class = dict(zip(CLASS_NAMES, self.val_per_class))
        out = [
            f"{'quantity':<28}{'ours':>10}{'reference':>12}",
            f"{'train accuracy':<28}{f.train_acc:>10.4f}{ref['train_accuracy']:>12.4f}",
            f"{'train loss':<28}{f.train_loss:>10.4f}{ref['train_loss']:>12.4f}",
            f"{'val accuracy':<28}{f.val_acc:>10.4f}{ref['val_accuracy']:>12.4f}",
            f"{'val loss':<28}{f.val_loss:>10.4f}{ref['val_loss']:>12.4f}",
        ]
        for name, target in ref["per_class_accuracy"].items():
            ours = per_class[name]
            out.append(f"{name + ' accuracy':<28}{(ours if ours is not None else float('nan')):>10.4f}"
                       f"{target:>12.4f}")
        if self.kfold is not None:
            out.append(f"{'k-fold mean':<28}{self.kfold.mean:>10.4f}{ref['kfold_mean']:>12.4f}")
            out.append(f"{'k-fold std':<28}{self.kfold.std:>10.4f}{ref['kfold_std']:>12.4f}")
        return out


def run(corpus_dir, config: TrainConfig, train_fraction: float = 0.8, folds: int = 0,
        on_epoch=None) -> RunReport:
    """Scan, split, train and evaluate; optionally follow with stratified K-fold."""
    index = scan_dataset(corpus_dir)
    loader = cached_loader(index, config.spec)
    tr, va = stratified_split(index, train_fraction, config.seed)
    start = time.perf_counter()
    params, metrics = train(config, tr, va, loader, on_epoch=on_epoch)
    seconds = time.perf_counter() - start
    result = evaluate(config.spec, params, va, loader, config.batch_size)
    counts = va.per_class_counts
    report = RunReport(config, tr.per_class_counts, counts, metrics,
                       result.per_class_accuracy(), result.confusion, seconds,
                       majority_baseline=max(counts) / sum(counts))
    if folds:
        report.kfold = kfold_run(config, index, folds, loader)
    return report
