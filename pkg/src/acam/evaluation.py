"""Classification metrics: confusion matrix, per-class P/R/F1, one-vs-rest ROC/AUC and PR/AP."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class UndefinedCurveError(ValueError):
    """A one-vs-rest curve needs both positives and negatives (ROC) or positives (PR)."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C], rows = true, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"confusion: {preds.size} predictions vs {labels.size} labels")
    if preds.size and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= num_classes):
        raise ValueError(f"confusion: class indices must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both are 0."""
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    # (class, metric) pairs that hit a 0/0 and were set to 0
    undefined: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(len(self.support))]
        return {
            "accuracy": self.accuracy,
            "macro": self.macro,
            "weighted": self.weighted,
            "per_class": [
                {"class": names[c], "index": c, "precision": float(self.precision[c]), "recall": float(self.recall[c]),
                 "f1": float(self.f1[c]), "support": int(self.support[c])}
                for c in range(len(self.support))
            ],
            "undefined": [{"class": names[c], "metric": m} for c, m in self.undefined],
        }


def class_report(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("class_report: empty confusion matrix")
    n = counts.shape[0]
    prec = np.zeros(n)
    rec = np.zeros(n)
    f1 = np.zeros(n)
    undefined = []
    for c in range(n):
        tp = counts[c, c]
        fp = counts[:, c].sum() - tp
        fn = counts[c, :].sum() - tp
        prec[c], bad_p = _ratio(tp, tp + fp)
        rec[c], bad_r = _ratio(tp, tp + fn)
        f1[c] = f1_score(prec[c], rec[c])
        undefined += [(c, m) for m, bad in (("precision", bad_p), ("recall", bad_r)) if bad]
        if prec[c] + rec[c] == 0:
            undefined.append((c, "f1"))
    support = counts.sum(axis=1)
    # weighted recall = sum_c TP_c / N = accuracy; computed from integers so the identity is exact
    accuracy = float(np.trace(counts) / total)
    wts = support / total
    macro = {"precision": float(prec.mean()), "recall": float(rec.mean()), "f1": float(f1.mean())}
    weighted = {
        "precision": float(np.dot(wts, prec)),
        "recall": float(np.trace(counts) / total),
        "f1": float(np.dot(wts, f1)),
    }
    return ClassReport(prec, rec, f1, support, accuracy, macro, weighted, undefined)


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def _one_vs_rest(scores, labels, c: int) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    s = scores[:, c] if scores.ndim == 2 else scores
    if s.size == 0 or not np.all(np.isfinite(s)):
        raise ValueError("curve: scores must be finite and non-empty")
    return s, labels == c


def _sweep(s: np.ndarray, pos: np.ndarray):
    """Cumulative TP/FP at each distinct threshold, highest first."""
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    return s[last], tp, fp


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray
    area: float


def roc_auc(scores, labels, c: int) -> Curve:
    """ROC points (FPR, TPR) from (0, 0) to (1, 1) and trapezoidal AUC (ties count half)."""
    s, pos = _one_vs_rest(scores, labels, c)
    npos, nneg = int(pos.sum()), int((~pos).sum())
    if npos == 0 or nneg == 0:
        raise UndefinedCurveError(f"ROC for class {c} needs positives and negatives ({npos} / {nneg})")
    thr, tp, fp = _sweep(s, pos)
    tpr = np.r_[0.0, tp / npos]
    fpr = np.r_[0.0, fp / nneg]
    # trapezoid on integer counts, normalised once
    tpi = np.r_[0, tp]
    fpi = np.r_[0, fp]
    auc = float(np.sum((fpi[1:] - fpi[:-1]) * (tpi[1:] + tpi[:-1])) / (2.0 * npos * nneg))
    return Curve(fpr, tpr, np.r_[np.inf, thr], auc)


def pr_ap(scores, labels, c: int) -> Curve:
    """PR points (recall, precision) per distinct threshold; AP = sum (R_i - R_{i-1}) P_i."""
    s, pos = _one_vs_rest(scores, labels, c)
    npos = int(pos.sum())
    if npos == 0:
        raise UndefinedCurveError(f"PR for class {c} has no positives")
    thr, tp, fp = _sweep(s, pos)
    recall = tp / npos
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0, tp]) / npos * precision))
    return Curve(recall, precision, thr, ap)


@dataclass
class CurveSet:
    roc: dict[int, Curve]
    pr: dict[int, Curve]
    skipped: list[int]


def curve_set(scores, labels, num_classes: int) -> CurveSet:
    roc, pr, skipped = {}, {}, []
    for c in range(num_classes):
        try:
            roc[c] = roc_auc(scores, labels, c)
            pr[c] = pr_ap(scores, labels, c)
        except UndefinedCurveError:
            roc.pop(c, None)
            skipped.append(c)
    return CurveSet(roc, pr, skipped)


# ---------------------------------------------------------------------------
# full evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    report: ClassReport
    confusion: ConfusionMatrix
    curves: CurveSet
    scores: np.ndarray
    labels: np.ndarray
    absent: list[int]


def evaluate_scores(scores: np.ndarray, labels, num_classes: int) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    cm = confusion(scores.argmax(axis=1), labels, num_classes)
    absent = [c for c in range(num_classes) if not np.any(labels == c)]
    return EvalResult(class_report(cm), cm, curve_set(scores, labels, num_classes), scores, labels, absent)


def evaluate(classifier, predictor, data, rng_spec=None, batch_size: int = 64) -> EvalResult:
    """Full deterministic pass over ``data`` keeping softmax scores for the curves."""
    from .contrast import RangeSpec
    from .train import predict_proba

    scores = predict_proba(classifier, predictor, data, rng_spec or RangeSpec(), batch_size)
    return evaluate_scores(scores, data.labels, data.num_classes)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_report(result: EvalResult, out_dir, names: Sequence[str], extra: dict | None = None) -> list[Path]:
    """report.json, per_class.csv, confusion.csv and curves/{roc,pr}_<class>.csv."""
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    written = []
    doc = result.report.to_dict(names)
    doc["num_samples"] = result.confusion.total
    doc["confusion"] = result.confusion.counts.tolist()
    doc["auc"] = {names[c]: cv.area for c, cv in result.curves.roc.items()}
    doc["ap"] = {names[c]: cv.area for c, cv in result.curves.pr.items()}
    doc["absent_classes"] = [names[c] for c in result.absent]
    doc["skipped_curves"] = [names[c] for c in result.curves.skipped]
    if extra:
        doc["meta"] = extra
    p = out / "report.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    written.append(p)

    p = out / "per_class.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "recall", "precision", "f1_score"])
        r = result.report
        for c, name in enumerate(names):
            w.writerow([name, _fmt(r.recall[c]), _fmt(r.precision[c]), _fmt(r.f1[c])])
    written.append(p)

    p = out / "confusion.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(names))
        for c, row in enumerate(result.confusion.counts):
            w.writerow([names[c]] + [int(v) for v in row])
    written.append(p)

    for c, cv in result.curves.roc.items():
        p = out / "curves" / f"roc_{names[c]}.csv"
        _write_curve(p, ("threshold", "fpr", "tpr"), cv.thresholds, cv.x, cv.y)
        written.append(p)
    for c, cv in result.curves.pr.items():
        p = out / "curves" / f"pr_{names[c]}.csv"
        _write_curve(p, ("threshold", "recall", "precision"), cv.thresholds, cv.x, cv.y)
        written.append(p)
    return written


def _write_curve(path, header, thr, x, y) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, a, b in zip(thr, x, y):
            w.writerow(["inf" if np.isinf(t) else repr(float(t)), repr(float(a)), repr(float(b))])
