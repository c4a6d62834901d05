"""Segmentation overlap scores, image-level anomaly reduction, ROC/AUC,
and table-style report aggregation. Pure numpy; no torch dependency.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .dataset import Mask
from .model import PredictedMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("negative confusion count")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary_array(m: Union[Mask, np.ndarray], name: str) -> np.ndarray:
    if isinstance(m, Mask):
        return m.values
    a = np.asarray(m)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} is not binary")
    return a.astype(np.uint8)


def binarize(pred: Union[PredictedMask, np.ndarray], threshold: float = 0.5) -> Mask:
    """Threshold probabilities into a hard mask; strictly-greater comparison,
    so a uniform 0.5 map at the default threshold is all background."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(pred, PredictedMask):
        probs = pred.probs.detach().cpu().numpy()
    else:
        probs = np.asarray(pred, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"probabilities must be 2-d, got shape {probs.shape}")
    return Mask(values=(probs > threshold).astype(np.uint8))


def confusion(pred: Union[Mask, np.ndarray], gt: Union[Mask, np.ndarray]) -> ConfusionCounts:
    p = _binary_array(pred, "pred")
    g = _binary_array(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.sum((p == 1) & (g == 1)))
    fp = int(np.sum((p == 1) & (g == 0)))
    fn = int(np.sum((p == 0) & (g == 1)))
    tn = int(np.sum((p == 0) & (g == 0)))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def iou(pred: Union[Mask, np.ndarray], gt: Union[Mask, np.ndarray]) -> float:
    """Intersection over union; two empty masks count as a perfect 1.0 so
    correctly-clean normal images are not penalized."""
    c = confusion(pred, gt)
    denom = c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0
    return c.tp / denom


def dice(pred: Union[Mask, np.ndarray], gt: Union[Mask, np.ndarray]) -> float:
    """Dice coefficient, same conventions as iou; equals 2*iou/(1+iou)."""
    c = confusion(pred, gt)
    denom = 2 * c.tp + c.fn + c.fp
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def mean_iou(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise ValueError("no iou values to average")
    return float(np.mean(values))


def anomaly_score(pred: Union[Mask, np.ndarray]) -> int:
    """Predicted defect area in pixels; any positive pixel flags the image."""
    return int(_binary_array(pred, "pred").sum())


def is_anomalous(score: float) -> bool:
    return score >= 1


def roc_auc(scores: Sequence[tuple[float, int]]) -> tuple[float, list[tuple[float, float]]]:
    """AUC plus the ROC polyline from thresholding anomaly scores.

    The AUC is computed as the rank statistic (ties get averaged ranks),
    which equals the fraction of anomalous/normal pairs ordered correctly
    with ties worth half, and also equals the trapezoidal area under the
    returned curve. Needs at least one example of each class.
    """
    if len(scores) == 0:
        raise ValueError("empty score list")
    s = np.asarray([p[0] for p in scores], dtype=np.float64)
    y = np.asarray([p[1] for p in scores])
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one normal and one anomalous example")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0  # 1-based average rank
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u / (n_pos * n_neg)

    points = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        hit = s >= thr
        tpr = float(np.sum(hit & (y == 1))) / n_pos
        fpr = float(np.sum(hit & (y == 0))) / n_neg
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return float(auc), points


@dataclass(frozen=True)
class ImageEval:
    """Scores for one test image. Normal images carry an all-zero groundtruth
    and enter only the image-level anomaly statistics."""

    category: str
    iou: float
    dice: float
    anomaly_score: int
    is_defect: bool


@dataclass(frozen=True)
class CategoryStats:
    mean_iou: float
    std_iou: float
    mean_dc: float
    std_dc: float


@dataclass(frozen=True)
class AnomalyStats:
    acc: float
    auc: float
    roc_points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class MetricReport:
    """Per-category overlap means (std across repeated runs), the unweighted
    grand mean, and image-level anomaly detection numbers."""

    per_category: dict[str, CategoryStats]
    overall_mean_iou: float
    overall_mean_dc: float
    anomaly: Optional[AnomalyStats] = None
    n_runs: int = 1

    def to_dict(self) -> dict:
        d: dict = {
            "per_category": {
                c: {
                    "mean_iou": s.mean_iou,
                    "std_iou": s.std_iou,
                    "mean_dc": s.mean_dc,
                    "std_dc": s.std_dc,
                }
                for c, s in self.per_category.items()
            },
            "overall_mean_iou": self.overall_mean_iou,
            "overall_mean_dc": self.overall_mean_dc,
            "n_runs": self.n_runs,
        }
        if self.anomaly is not None:
            d["anomaly"] = {
                "acc": self.anomaly.acc,
                "auc": self.anomaly.auc,
                "roc_points": [list(p) for p in self.anomaly.roc_points],
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["category", "mean_iou", "std_iou", "mean_dc", "std_dc"])
        for c in sorted(self.per_category):
            s = self.per_category[c]
            w.writerow([c, s.mean_iou, s.std_iou, s.mean_dc, s.std_dc])
        w.writerow(["Mean", self.overall_mean_iou, "", self.overall_mean_dc, ""])
        if self.anomaly is not None:
            w.writerow([])
            w.writerow(["acc", self.anomaly.acc])
            w.writerow(["auc", self.anomaly.auc])
        return buf.getvalue()

    def save_roc_plot(self, path):
        if self.anomaly is None:
            raise ValueError("no anomaly statistics to plot")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        pts = np.asarray(self.anomaly.roc_points)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(pts[:, 0], pts[:, 1], marker="o", ms=3)
        ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(f"AUC = {self.anomaly.auc:.4f}")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)


def _std(values: Sequence[float]) -> float:
    # sample std across repeated runs; a single run has no spread
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def aggregate(runs: Union[Sequence[ImageEval], Sequence[Sequence[ImageEval]]]) -> MetricReport:
    """Fold per-image scores into a report.

    Accepts one run (flat list) or several (list of lists, e.g. one per
    seed). Overlap means are taken over defect images within a run and per
    category; the std is across runs. The grand mean averages category means
    unweighted. Anomaly stats pool every run's (score, label) pairs and are
    omitted (with a warning) when only one class is present.
    """
    if len(runs) and isinstance(runs[0], ImageEval):
        runs = [runs]  # single run
    runs = [list(r) for r in runs]
    if not runs or all(len(r) == 0 for r in runs):
        raise ValueError("no image results to aggregate")

    categories = sorted({e.category for r in runs for e in r if e.is_defect})
    per_category: dict[str, CategoryStats] = {}
    for c in categories:
        run_ious, run_dcs = [], []
        for r in runs:
            vals = [e for e in r if e.is_defect and e.category == c]
            if vals:
                run_ious.append(float(np.mean([e.iou for e in vals])))
                run_dcs.append(float(np.mean([e.dice for e in vals])))
        if not run_ious:
            logger.warning("category %r has no defect images in any run; omitted", c)
            continue
        per_category[c] = CategoryStats(
            mean_iou=float(np.mean(run_ious)),
            std_iou=_std(run_ious),
            mean_dc=float(np.mean(run_dcs)),
            std_dc=_std(run_dcs),
        )
    if not per_category:
        raise ValueError("no defect images in any run; nothing to report")

    overall_iou = float(np.mean([s.mean_iou for s in per_category.values()]))
    overall_dc = float(np.mean([s.mean_dc for s in per_category.values()]))

    pairs = [(float(e.anomaly_score), int(e.is_defect)) for r in runs for e in r]
    labels = {p[1] for p in pairs}
    anomaly = None
    if labels == {0, 1}:
        auc, points = roc_auc(pairs)
        acc = float(np.mean([is_anomalous(s) == bool(y) for s, y in pairs]))
        anomaly = AnomalyStats(acc=acc, auc=auc, roc_points=tuple(map(tuple, points)))
    else:
        logger.warning("single-class test split; anomaly stats omitted")

    return MetricReport(
        per_category=per_category,
        overall_mean_iou=overall_iou,
        overall_mean_dc=overall_dc,
        anomaly=anomaly,
        n_runs=len(runs),
    )
