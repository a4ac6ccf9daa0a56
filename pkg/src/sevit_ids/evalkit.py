"""Evaluation metrics: confusion matrix, classification report, ROC/AUC, latency.

Conventions
-----------
* Confusion matrix rows are true classes, columns predicted classes.
* A ratio whose denominator is zero is reported as 0.
* ``fpr`` is the macro average of the one-vs-rest false-positive rate
  ``FP / (FP + TN)``.
* ROC curves score class ``c`` by its raw softmax probability.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError, ShapeError


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ShapeError(f"y_true {y_true.shape} and y_pred {y_pred.shape} must be equal-length vectors")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{name} has labels outside [0, {k})")
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class ClassReport:
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    class_fpr: list[float]
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    micro: dict[str, float]
    macro_fpr: float
    total: int

    def to_dict(self) -> dict:
        return {
            "classes": [
                {
                    "name": name,
                    "precision": p,
                    "recall": r,
                    "f1": f,
                    "support": s,
                    "fpr": fp,
                }
                for name, p, r, f, s, fp in zip(
                    self.class_names, self.precision, self.recall, self.f1, self.support, self.class_fpr
                )
            ],
            "accuracy": self.accuracy,
            "macro_avg": self.macro,
            "weighted_avg": self.weighted,
            "micro_avg": self.micro,
            "fpr_macro": self.macro_fpr,
            "total": self.total,
        }

    def to_text(self, digits: int = 4) -> str:
        """Aligned table in the usual classification-report layout."""
        width = max(len("weighted avg"), *(len(n) for n in self.class_names))
        head = f"{'':>{width}}  {'precision':>9}  {'recall':>9}  {'f1-score':>9}  {'support':>9}"
        lines = [head, ""]
        for i, name in enumerate(self.class_names):
            lines.append(
                f"{name:>{width}}  {self.precision[i]:>9.{digits}f}  {self.recall[i]:>9.{digits}f}  "
                f"{self.f1[i]:>9.{digits}f}  {self.support[i]:>9d}"
            )
        lines.append("")
        lines.append(f"{'accuracy':>{width}}  {'':>9}  {'':>9}  {self.accuracy:>9.{digits}f}  {self.total:>9d}")
        for label, avg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(
                f"{label:>{width}}  {avg['precision']:>9.{digits}f}  {avg['recall']:>9.{digits}f}  "
                f"{avg['f1']:>9.{digits}f}  {self.total:>9d}"
            )
        lines.append("")
        lines.append(f"{'macro FPR':>{width}}  {self.macro_fpr:>9.{digits}f}")
        return "\n".join(lines) + "\n"


def class_report(cm, class_names=None) -> ClassReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ShapeError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise DataError("confusion matrix has no counts")
    k = cm.shape[0]
    if class_names is None:
        class_names = [str(c) for c in range(k)]
    tp = np.diag(cm)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision, recall, f1, fpr = [], [], [], []
    for c in range(k):
        t, fp, fn = int(tp[c]), int(col[c] - tp[c]), int(row[c] - tp[c])
        tn = total - t - fp - fn
        p = _ratio(t, t + fp)
        r = _ratio(t, t + fn)
        precision.append(p)
        recall.append(r)
        f1.append(_ratio(2 * t, 2 * t + fp + fn))
        fpr.append(_ratio(fp, fp + tn))
    support = [int(s) for s in row]
    weights = np.asarray(support, dtype=np.float64) / total

    def avg(values, w=None):
        return float(np.mean(values)) if w is None else float(np.dot(values, w))

    trace = int(tp.sum())
    # single-label: summed FP and FN both equal total - trace
    micro_fp = int(col.sum() - trace)
    micro_fn = int(row.sum() - trace)
    micro = {
        "precision": _ratio(trace, trace + micro_fp),
        "recall": _ratio(trace, trace + micro_fn),
        "f1": _ratio(2 * trace, 2 * trace + micro_fp + micro_fn),
    }
    return ClassReport(
        class_names=list(class_names),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        class_fpr=fpr,
        accuracy=trace / total,
        macro={"precision": avg(precision), "recall": avg(recall), "f1": avg(f1)},
        weighted={"precision": avg(precision, weights), "recall": avg(recall, weights), "f1": avg(f1, weights)},
        micro=micro,
        macro_fpr=avg(fpr),
        total=total,
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["threshold", "fpr", "tpr"])
            for th, f, t in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([repr(float(th)), repr(float(f)), repr(float(t))])


def roc_curve(scores, y_true, c: int) -> RocCurve:
    """One-vs-rest ROC for class ``c``.

    ``scores`` may be the full probability matrix or the single score column.
    Thresholds are ``+inf`` followed by the distinct scores in descending
    order; a point counts an instance positive when its score is ``>=`` the
    threshold, so the curve runs from (0, 0) to (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 2:
        scores = scores[:, c]
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.shape != y_true.shape:
        raise ShapeError(f"scores {scores.shape} and labels {y_true.shape} differ in length")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    positive = y_true == c
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"ROC for class {c} is undefined: need both positives and negatives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(pos)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


@dataclass
class LatencyReport:
    mean_seconds: float
    instances: int
    warmup: int
    total_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mean_seconds_per_instance": self.mean_seconds,
            "instances": self.instances,
            "warmup": self.warmup,
            "total_seconds": self.total_seconds,
        }


def latency_benchmark(model, x, warmup: int = 10, reps: int = 1000) -> LatencyReport:
    """Mean wall time of single-instance forward passes, after untimed warmup.

    Instances are taken cyclically from ``x``.
    """
    if reps < 1:
        raise DataError("reps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise DataError("latency benchmark needs at least one instance")
    for i in range(warmup):
        model.forward(x[i % n : i % n + 1])
    total = 0.0
    for i in range(reps):
        xi = x[i % n : i % n + 1]
        start = time.perf_counter()
        model.forward(xi)
        total += time.perf_counter() - start
    # perf_counter can tick coarser than a tiny forward pass
    total = max(total, np.finfo(float).tiny)
    return LatencyReport(total / reps, reps, warmup, total)


@dataclass
class EvalReport:
    confusion: np.ndarray
    report: ClassReport
    roc: dict[int, RocCurve] = field(default_factory=dict)
    loss: float = float("nan")

    def to_dict(self) -> dict:
        out = {"loss": self.loss, "confusion_matrix": self.confusion.tolist()}
        out.update(self.report.to_dict())
        out["auc"] = {self.report.class_names[c]: r.auc for c, r in sorted(self.roc.items())}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        k = self.confusion.shape[0]
        width = max(6, *(len(str(v)) for v in self.confusion.ravel()))
        lines = [self.report.to_text(), "confusion matrix (rows = true, columns = predicted)"]
        lines.append(" " * 4 + " ".join(f"{c:>{width}d}" for c in range(k)))
        for c in range(k):
            lines.append(f"{c:>3d} " + " ".join(f"{v:>{width}d}" for v in self.confusion[c]))
        if self.roc:
            lines.append("")
            lines.append("one-vs-rest AUC")
            for c, r in sorted(self.roc.items()):
                lines.append(f"  {self.report.class_names[c]}: {r.auc:.6f}")
        if np.isfinite(self.loss):
            lines.append("")
            lines.append(f"loss: {self.loss:.6f}")
        return "\n".join(lines) + "\n"


def accuracy_from_cm(cm) -> Fraction:
    """Exact trace/total, used to cross-check reported accuracy."""
    cm = np.asarray(cm, dtype=np.int64)
    return Fraction(int(np.trace(cm)), int(cm.sum()))


def evaluate(probs, y_true, class_names, loss: float = float("nan")) -> EvalReport:
    """Full report from a probability matrix.  ROC is skipped for classes absent from ``y_true``."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    k = len(class_names)
    y_pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(y_true, y_pred, k)
    report = class_report(cm, class_names)
    roc = {}
    for c in range(k):
        n_pos = int((y_true == c).sum())
        if 0 < n_pos < y_true.size:
            roc[c] = roc_curve(probs[:, c], y_true, c)
    return EvalReport(cm, report, roc, loss)
