"""Accuracy, macro-F1 and the class-balanced bootstrap (BS-F1)."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


def _labels(y, n_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("label vectors must be 1-D")
    y = y.astype(np.int64)
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    return y


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    t, p = _labels(y_true, n_classes), _labels(y_pred, n_classes)
    if t.size != p.size:
        raise ValueError(f"length mismatch: {t.size} vs {p.size}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def precision_recall_f1(y_true, y_pred, n_classes: int):
    """Per-class precision, recall and F1; any 0/0 ratio counts as 0."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    return precision, recall, f1


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes (absent classes score 0)."""
    f1 = precision_recall_f1(y_true, y_pred, n_classes)[2]
    total = 0.0
    for value in f1.tolist():
        total += value
    return total / n_classes


def accuracy(y_true, y_pred) -> float:
    t, p = _labels(y_true), _labels(y_pred)
    if t.size != p.size:
        raise ValueError(f"length mismatch: {t.size} vs {p.size}")
    if t.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(t == p))


@dataclass
class BootstrapResult:
    mean: float
    min: float
    max: float
    replicates: list[float]
    per_class_n: int
    seed: int
    subsets: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def n_replicates(self) -> int:
        return len(self.replicates)


def bootstrap_bsf1(y_true, y_pred, n_classes: int, n_replicates: int = 100,
                   per_class_n: int | None = None, seed: int = 0,
                   keep_subsets: bool = False) -> BootstrapResult:
    """Macro-F1 over ``n_replicates`` class-balanced subsets.

    Each replicate draws ``per_class_n`` items from every class without
    replacement (default: the smallest class count). Replicate ``b`` uses
    its own stream spawned from ``seed``.
    """
    t, p = _labels(y_true, n_classes), _labels(y_pred, n_classes)
    if t.size != p.size:
        raise ValueError(f"length mismatch: {t.size} vs {p.size}")
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    by_class = [np.flatnonzero(t == c) for c in range(n_classes)]
    sizes = [idx.size for idx in by_class]
    missing = [c for c, s in enumerate(sizes) if s == 0]
    if missing:
        raise ValueError(f"classes {missing} absent from the evaluation labels")
    if per_class_n is None:
        per_class_n = min(sizes)
    if not 1 <= per_class_n <= min(sizes):
        raise ValueError(f"per_class_n={per_class_n} exceeds smallest class count {min(sizes)}")

    scores, subsets = [], []
    for stream in np.random.SeedSequence(seed).spawn(n_replicates):
        rng = np.random.default_rng(stream)
        subset = np.concatenate([rng.choice(idx, size=per_class_n, replace=False) for idx in by_class])
        scores.append(macro_f1(t[subset], p[subset], n_classes))
        if keep_subsets:
            subsets.append(subset)
    lo, hi = min(scores), max(scores)
    # fsum/n can still land one ulp outside the replicate range
    avg = min(max(math.fsum(scores) / len(scores), lo), hi)
    return BootstrapResult(avg, lo, hi, scores, per_class_n, seed, subsets if keep_subsets else None)


@dataclass
class EvalReport:
    n: int
    accuracy: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    class_names: list[str]
    bootstrap: dict | None = None
    confusion: list[list[int]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"samples\t{self.n}", f"F1\t{self.macro_f1:.4f}", f"Acc\t{self.accuracy:.4f}"]
        if self.bootstrap is not None:
            b = self.bootstrap
            lines.append(f"BS-F1\t{b['mean']:.4f}")
            lines.append(f"BS-F1 range\t[{b['min']:.4f}, {b['max']:.4f}]")
            lines.append(f"bootstrap\tB={b['replicates']} per_class_n={b['per_class_n']} seed={b['seed']}")
        lines.append("class\tprecision\trecall\tf1")
        for name, pr, rc, f in zip(self.class_names, self.precision, self.recall, self.f1):
            lines.append(f"{name}\t{pr:.4f}\t{rc:.4f}\t{f:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(y_true, y_pred, n_classes: int, class_names=None, n_bootstrap: int | None = None,
             seed: int = 0, per_class_n: int | None = None) -> tuple[EvalReport, BootstrapResult | None]:
    precision, recall, f1 = precision_recall_f1(y_true, y_pred, n_classes)
    names = list(class_names) if class_names is not None else [str(c) for c in range(n_classes)]
    boot = None
    boot_block = None
    if n_bootstrap:
        boot = bootstrap_bsf1(y_true, y_pred, n_classes, n_bootstrap, per_class_n, seed)
        boot_block = {"replicates": boot.n_replicates, "per_class_n": boot.per_class_n, "mean": boot.mean,
                      "min": boot.min, "max": boot.max, "seed": seed}
    report = EvalReport(int(np.asarray(y_true).size), accuracy(y_true, y_pred),
                        macro_f1(y_true, y_pred, n_classes),
                        precision.tolist(), recall.tolist(), f1.tolist(), names, boot_block,
                        confusion_matrix(y_true, y_pred, n_classes).tolist())
    return report, boot
