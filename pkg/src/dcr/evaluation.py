"""Metrics and the conflict / action / confidence analyses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SUBSETS = ("all", "none", "benign", "severe")


def _confusion(predictions, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, y in zip(predictions, labels):
        cm[int(y), int(p)] += 1
    return cm


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], num_classes: int | None = None) -> float:
    """Per-class F1 weighted by true-class support. Classes with no support weigh 0."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not len(labels):
        raise ValueError("empty input")
    if num_classes is None:
        num_classes = int(max(max(predictions), max(labels))) + 1
    cm = _confusion(predictions, labels, num_classes)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * support).sum() / support.sum())


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    num_classes: int
    mae: float | None = None
    corr: float | None = None
    f1_neg_vs_nonneg: float | None = None
    f1_neg_vs_pos: float | None = None

    def row(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def compute_metrics(
    predictions: Sequence[int], labels: Sequence[int], num_classes: int | None = None,
    class_values: Sequence[float] | None = None,
    scalar_targets: Sequence[float] | None = None,
    scalar_predictions: Sequence[float] | None = None,
) -> MetricsReport:
    """Accuracy, weighted F1 and, when scalar values are available, MAE, Pearson
    correlation and the two binary F1 scores.

    ``class_values`` maps a class index to a scalar (e.g. polarity -1/0/+1);
    it supplies scalar predictions and, absent ``scalar_targets``, scalar targets.
    Binary F1s are support-weighted: negative vs non-negative uses every sample
    (value < 0 against >= 0); negative vs positive drops samples whose target is 0.
    """
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if not len(labels):
        raise ValueError("empty input")
    preds, ys = np.asarray(predictions, dtype=int), np.asarray(labels, dtype=int)
    if num_classes is None:
        num_classes = int(max(preds.max(), ys.max())) + 1
    report = MetricsReport(float((preds == ys).mean()), weighted_f1(preds, ys, num_classes), num_classes)

    if scalar_predictions is None and class_values is not None:
        scalar_predictions = np.asarray(class_values, dtype=float)[preds]
    if scalar_targets is None and class_values is not None:
        scalar_targets = np.asarray(class_values, dtype=float)[ys]
    if scalar_predictions is not None and scalar_targets is not None:
        sp, st = np.asarray(scalar_predictions, dtype=float), np.asarray(scalar_targets, dtype=float)
        if sp.shape != st.shape or len(sp) != len(preds):
            raise ValueError("scalar predictions/targets length mismatch")
        report.mae = float(np.abs(sp - st).mean())
        report.corr = pearson(sp, st)
        report.f1_neg_vs_nonneg = weighted_f1((sp >= 0).astype(int), (st >= 0).astype(int), 2)
        nz = st != 0
        if nz.any():
            report.f1_neg_vs_pos = weighted_f1((sp[nz] > 0).astype(int), (st[nz] > 0).astype(int), 2)
    return report


def conflict_subset_eval(predictions: Sequence[int], labels: Sequence[int], conflicts: Sequence[str]) -> dict:
    """Accuracy and size per conflict subset; empty subsets map to accuracy None."""
    if not len(predictions) == len(labels) == len(conflicts):
        raise ValueError("length mismatch")
    preds, ys = np.asarray(predictions), np.asarray(labels)
    table = {}
    for name in SUBSETS:
        mask = np.ones(len(ys), bool) if name == "all" else np.asarray([c == name for c in conflicts], bool)
        n = int(mask.sum())
        table[name] = {"n": n, "accuracy": float((preds[mask] == ys[mask]).mean()) if n else None}
    return table


def action_distribution(actions: Sequence[int], conflicts: Sequence[str], num_actions: int) -> dict:
    """Selection frequency of each action, overall and per conflict subset.
    Empty subsets map to None."""
    if len(actions) != len(conflicts):
        raise ValueError("length mismatch")
    acts = np.asarray(actions, dtype=int)
    out = {}
    for name in SUBSETS:
        mask = np.ones(len(acts), bool) if name == "all" else np.asarray([c == name for c in conflicts], bool)
        n = int(mask.sum())
        out[name] = (np.bincount(acts[mask], minlength=num_actions) / n).tolist() if n else None
    return out


def topk_confidence_curve(probs, k: int, thresholds: Sequence[float]) -> list[float]:
    """Fraction of samples whose top-``k`` probability mass is >= each threshold."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise ValueError("probs must be (N, C)")
    if not 0 < k < p.shape[1]:
        raise ValueError(f"k must satisfy 0 < k < C={p.shape[1]}")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    mass = -np.sort(-p, axis=1)[:, :k].sum(axis=1)
    return [float((mass >= t).mean()) for t in thresholds]


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return float("nan"), float("nan")
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=0))
