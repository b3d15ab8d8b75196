"""Binary classification metrics, ROC construction and the late-fusion weight sweep."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .fusion import LateFusionModel, DEFAULT_SWEEP_WEIGHTS, late_fuse, predict_label

EPS = 1e-7


def bce_loss(p, y) -> float:
    """Mean of ``-log p_true`` with probabilities clamped to ``[EPS, 1 - EPS]``.

    ``p`` is a batch of ``(p_fake, p_real)`` pairs; ``y`` holds 1 for fake, 0 for real.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(y).reshape(-1)
    if len(y) == 0:
        raise ValueError("bce_loss of an empty batch")
    if len(y) != len(p):
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    p_true = np.where(y == 1, p[:, 0], p[:, 1])
    return float(-np.log(np.clip(p_true, EPS, 1 - EPS)).mean())


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_points: list[tuple[float, float, float]] | None = None
    auc: float | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.roc_points is not None:
            d["roc_points"] = [[fpr, tpr, thr if np.isfinite(thr) else "inf"] for fpr, tpr, thr in self.roc_points]
        return d


def compute_metrics(predictions, truths) -> MetricsReport:
    """Confusion counts and derived scores with fake (1) as the positive class."""
    pred = np.asarray(predictions).astype(np.int64).reshape(-1)
    true = np.asarray(truths).astype(np.int64).reshape(-1)
    if len(pred) != len(true):
        raise ValueError(f"{len(pred)} predictions for {len(true)} truths")
    if len(pred) == 0:
        raise ValueError("no predictions to score")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(tp, fp, fn, tn, (tp + tn) / len(pred), precision, recall, f1)


def roc_curve(scores, truths) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points ``(fpr, tpr, threshold)`` for every distinct score, plus trapezoidal AUC.

    An item counts as positive at threshold ``t`` when its score is ``>= t``.
    Points run from threshold ``+inf`` (0, 0) down to the lowest score (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(truths).astype(np.int64).reshape(-1)
    if len(s) == 0 or len(s) != len(y):
        raise ValueError("scores and truths must be nonempty and of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes among the truths")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(a), float(b), float(t)) for a, b, t in zip(fpr, tpr, thresholds)]
    return points, auc


def evaluate_probabilities(p, y, threshold: float = 0.5) -> MetricsReport:
    """Full report (including ROC when both classes are present) from probability pairs."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    report = compute_metrics(predict_label(p, threshold), y)
    y = np.asarray(y)
    if 0 < y.sum() < len(y):
        report.roc_points, report.auc = roc_curve(p[:, 0], y)
    return report


@dataclass
class SweepRow:
    fusion: str
    w1: float
    w2: float
    metrics: MetricsReport = field(repr=False)


def weight_sweep(
    model: LateFusionModel,
    text: np.ndarray,
    image: np.ndarray,
    y,
    weights: Sequence[tuple[float, float]] = DEFAULT_SWEEP_WEIGHTS,
) -> list[SweepRow]:
    """Score the late-fusion model at several ``(w1, w2)`` without retraining.

    Each head runs once in inference mode; only the averaging is repeated.
    """
    if not weights:
        raise ValueError("weight list is empty")
    p_text, p_image = model.stream_proba(text, image, "infer")
    rows = []
    for w1, w2 in weights:
        fused = late_fuse(p_text, p_image, w1, w2)
        rows.append(SweepRow("late", float(w1), float(w2), evaluate_probabilities(fused, y)))
    return rows


SWEEP_COLUMNS = ("fusion", "w1", "w2", "accuracy", "precision", "recall", "f1")


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        m = r.metrics
        writer.writerow([r.fusion, r.w1, r.w2, repr(m.accuracy), repr(m.precision), repr(m.recall), repr(m.f1)])
    return buf.getvalue()
