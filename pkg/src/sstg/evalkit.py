"""Classification metrics, ROC curves and embedding export.

Metrics pool every node-level prediction (one row per sample x node);
:func:`compute_metrics_macro` averages per-sample metrics instead.
The confusion matrix has rows = actual class, columns = predicted class, in
the order (negative, positive). A score is predicted positive when it is
>= the threshold.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricReport:
    accuracy: float
    auc: float
    f1: float
    confusion: np.ndarray
    roc_points: list = field(default_factory=list)
    auc_defined: bool = True
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": None if not self.auc_defined else self.auc,
            "auc_defined": self.auc_defined,
            "f1": self.f1,
            "threshold": self.threshold,
            "confusion": self.confusion.tolist(),
        }


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape or s.size == 0:
        raise ValueError(f"scores and labels must be equal non-empty lengths, got {s.size} and {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC with tied scores given average ranks; NaN for one class."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)  # average ranks, so ties count half
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points (fpr, tpr) with one threshold per distinct score, from (0, 0) to (1, 1)."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]) if hasattr(np, "trapezoid")
                 else np.trapz(pts[:, 1], pts[:, 0]))


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricReport:
    s, y = _flat(scores, labels)
    pred = (s >= threshold).astype(np.int64)
    confusion = np.zeros((2, 2), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    tn, fp, fn, tp = confusion.ravel()
    accuracy = float((tp + tn) / y.size)
    f1_den = 2 * tp + fp + fn
    f1 = float(2 * tp / f1_den) if f1_den else 0.0
    auc = rank_auc(s, y)
    defined = not math.isnan(auc)
    roc = roc_curve(s, y) if defined else []
    return MetricReport(accuracy, auc, f1, confusion, roc, defined, threshold)


def compute_metrics_macro(scores, labels, threshold: float = 0.5) -> dict:
    """Per-sample metrics averaged over samples; AUC averages only samples where it is defined."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    reports = [compute_metrics(s, y, threshold) for s, y in zip(scores, labels)]
    aucs = [r.auc for r in reports if r.auc_defined]
    return {
        "accuracy": float(np.mean([r.accuracy for r in reports])),
        "f1": float(np.mean([r.f1 for r in reports])),
        "auc": float(np.mean(aucs)) if aucs else None,
        "auc_samples": len(aucs),
    }


def write_roc_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            w.writerow([repr(fpr), repr(tpr)])


def write_confusion_csv(path, confusion):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actual\\predicted", "0", "1"])
        for k, row in enumerate(np.asarray(confusion)):
            w.writerow([k, int(row[0]), int(row[1])])


def embeddings_csv(emb, labels) -> str:
    """Rows ``sample,node,e0..e{D-1},label`` for (S, N, D) embeddings and (S, N) labels."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    s_count, n_nodes, dim = emb.shape
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "node"] + [f"e{d}" for d in range(dim)] + ["label"])
    for s in range(s_count):
        for n in range(n_nodes):
            w.writerow([s, n] + [format(v, ".9g") for v in emb[s, n]] + [int(labels[s, n])])
    return buf.getvalue()


def export_embeddings(model, x, labels, out, batch_size: int = 32):
    """Write main-branch node embeddings (time-pooled decoder output) for external projection."""
    from .training import predict

    cfg = model.cfg
    expected = (cfg.n_nodes, cfg.n_bands, cfg.n_steps)
    if tuple(np.shape(x)[1:]) != expected:
        raise ValueError(f"data shape {tuple(np.shape(x)[1:])} does not match checkpoint {expected}")
    _, emb = predict(model, x, batch_size=batch_size, with_embedding=True)
    text = embeddings_csv(emb, labels)
    Path(out).write_text(text)
    return Path(out)
