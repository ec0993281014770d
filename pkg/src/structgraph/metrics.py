"""Classification metrics: confusion counts, P/R/F1, ROC with trapezoidal AUC, Welch's t-test."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SampleRecord, load_sample, split_records
from .graph import node_labels_for_grid
from .sgnn import Model

THRESHOLD = 0.5


class UndefinedAUCError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with the negative class treated as positive."""
        return ConfusionMatrix(tn=self.tp, fp=self.fn, fn=self.fp, tp=self.tn)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn + other.tn, self.fp + other.fp, self.fn + other.fn, self.tp + other.tp)

    def to_dict(self) -> dict[str, int]:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


def _check_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = THRESHOLD) -> ConfusionMatrix:
    s, y = _check_pair(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tp=int(np.sum(pred & pos)),
    )


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class Prf1:
    precision: float
    recall: float
    f1: float
    accuracy: float
    macro_f1: float
    negative_f1: float


def prf1(cm: ConfusionMatrix) -> Prf1:
    """Zero denominators yield 0 (precision, recall, F1)."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")

    def side(tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return p, r, _f1(p, r)

    p, r, f = side(cm.tp, cm.fp, cm.fn)
    _, _, f_neg = side(cm.tn, cm.fn, cm.fp)
    return Prf1(p, r, f, (cm.tp + cm.tn) / cm.total, (f + f_neg) / 2.0, f_neg)


# ---------------------------------------------------------------------------
# ROC

@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]  # (fpr, tpr, threshold)
    auc: float

    def to_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        for fpr, tpr, thr in self.points:
            lines.append(f"{thr!r},{fpr!r},{tpr!r}")
        lines.append(f"# auc={self.auc!r}")
        return "\n".join(lines) + "\n"


def roc_auc(scores, labels) -> RocCurve:
    """ROC over distinct score thresholds (descending); ties share one threshold.

    The area is accumulated in integer counts, so it equals the Mann-Whitney
    pair count ``(#{s+ > s-} + #{s+ == s-}/2) / (P N)`` exactly.
    """
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.nonzero(np.diff(s) != 0)[0].tolist() + [s.size - 1]
    tp_cum = np.cumsum(y)
    fp_cum = np.cumsum(1 - y)
    points = [(0.0, 0.0, math.inf)]
    area2 = 0  # twice the area, in units of 1/(P N)
    tp_prev = fp_prev = 0
    for e in ends:
        tp, fp = int(tp_cum[e]), int(fp_cum[e])
        area2 += (fp - fp_prev) * (tp + tp_prev)
        points.append((fp / n_neg, tp / n_pos, float(s[e])))
        tp_prev, fp_prev = tp, fp
    return RocCurve(points, area2 / (2 * n_pos * n_neg))


# ---------------------------------------------------------------------------
# Welch's t-test

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p_two_sided: float


def welch_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> TTestResult:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = float(a.mean()), float(b.mean())
    qa = float(a.var(ddof=1)) / a.size
    qb = float(b.var(ddof=1)) / b.size
    se2 = qa + qb
    if se2 == 0.0:
        if ma == mb:
            return TTestResult(0.0, float(a.size + b.size - 2), 1.0)
        raise ValueError("both samples have zero variance but different means")
    t = (ma - mb) / math.sqrt(se2)
    dof = se2 * se2 / (qa * qa / (a.size - 1) + qb * qb / (b.size - 1))
    return TTestResult(t, dof, student_t_two_sided(t, dof))


# ---------------------------------------------------------------------------
# evaluation

def graph_scores(model: Model, images: Sequence[np.ndarray]) -> list[float]:
    return [model.forward(img).graph_prob for img in images]


@dataclass
class LevelMetrics:
    confusion: ConfusionMatrix
    scores: Prf1
    auc: float | None
    roc: RocCurve | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.to_dict(),
            "precision": self.scores.precision,
            "recall": self.scores.recall,
            "f1": self.scores.f1,
            "accuracy": self.scores.accuracy,
            "macro_f1": self.scores.macro_f1,
            "auc": self.auc,
        }


def level_metrics(scores, labels, threshold: float = THRESHOLD) -> LevelMetrics:
    cm = confusion(scores, labels, threshold)
    try:
        roc = roc_auc(scores, labels)
        auc = roc.auc
    except UndefinedAUCError:
        roc, auc = None, None
    return LevelMetrics(cm, prf1(cm), auc, roc)


@dataclass
class MetricsReport:
    split: str
    graph: LevelMetrics
    node: LevelMetrics | None
    graph_scores: list[float]
    graph_labels: list[int]
    per_image_node_f1: list[float]
    threshold: float = THRESHOLD

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_samples": len(self.graph_labels),
            "threshold": self.threshold,
            "graph": self.graph.to_dict(),
            "node": None if self.node is None else self.node.to_dict(),
            "per_image_node_f1": self.per_image_node_f1,
            "graph_scores": self.graph_scores,
            "graph_labels": self.graph_labels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(model: Model, records: Sequence[SampleRecord], split: str = "test") -> MetricsReport:
    recs = split_records(list(records), split)
    if not recs:
        raise ValueError(f"split {split!r} is empty")
    size = model.config.image_size
    down = model.config.backbone.downsample
    g_scores, g_labels, per_image_f1 = [], [], []
    node_scores, node_labels = [], []
    for rec in recs:
        image, mask = load_sample(rec, size)
        out = model.forward(image)
        g_scores.append(out.graph_prob)
        g_labels.append(rec.label)
        if mask is not None:
            lab = node_labels_for_grid(mask, *out.grid_shape, down).labels
            node_scores.append(out.node_probs)
            node_labels.append(lab)
            per_image_f1.append(prf1(confusion(out.node_probs, lab)).f1)
    node = None
    if node_scores:
        node = level_metrics(np.concatenate(node_scores), np.concatenate(node_labels))
    return MetricsReport(split, level_metrics(g_scores, g_labels), node, g_scores, g_labels, per_image_f1)
