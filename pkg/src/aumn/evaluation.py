"""Detection-style scoring: temporal IoU, AP / mAP over IoU thresholds, AUC."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
AVERAGE_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class GroundTruthInstance:
    video_id: str
    class_id: int
    start: float
    end: float

    def __post_init__(self):
        if self.end < self.start:
            raise ValidationError(f"ground truth ends before it starts: {self}")


def temporal_iou(p1, p2, inclusive: bool = True) -> float:
    """IoU of two intervals given as objects with ``start``/``end`` or pairs.

    With ``inclusive`` the bounds are segment indices and an interval covers
    ``end - start + 1`` segments; otherwise they are continuous times.
    """
    s1, e1 = _bounds(p1)
    s2, e2 = _bounds(p2)
    pad = 1 if inclusive else 0
    inter = min(e1, e2) - max(s1, s2) + pad
    if inter <= 0:
        return 0.0
    union = (e1 - s1 + pad) + (e2 - s2 + pad) - inter
    return inter / union


def _bounds(p) -> tuple[float, float]:
    if hasattr(p, "start"):
        return p.start, p.end
    s, e = p
    return s, e


def ranking_key(p):
    """Score descending, then earlier start, then shorter interval."""
    return (-p.score, p.start, p.end - p.start, getattr(p, "video_id", ""))


def match_detections(proposals, ground_truth, iou_threshold: float, inclusive: bool = True) -> np.ndarray:
    """Greedy true-positive flags for proposals already in ranking order."""
    by_video: dict[str, list] = {}
    for g in ground_truth:
        by_video.setdefault(g.video_id, []).append(g)
    used = {vid: [False] * len(gts) for vid, gts in by_video.items()}
    tp = np.zeros(len(proposals), dtype=bool)
    for k, p in enumerate(proposals):
        gts = by_video.get(p.video_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if used[p.video_id][j]:
                continue
            iou = temporal_iou(p, g, inclusive)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[p.video_id][best] = True
            tp[k] = True
    return tp


def average_precision(
    proposals: Sequence,
    ground_truth: Sequence[GroundTruthInstance],
    class_id: int,
    iou_threshold: float,
    inclusive: bool = True,
) -> float:
    """All-point interpolated AP for one class; NaN (with a warning) if it has no ground truth."""
    gts = [g for g in ground_truth if g.class_id == class_id]
    if not gts:
        warnings.warn(f"class {class_id} has no ground truth; AP undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    dets = sorted((p for p in proposals if p.class_id == class_id), key=ranking_key)
    if not dets:
        return 0.0
    tp = match_detections(dets, gts, iou_threshold, inclusive)
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(dets) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[tp].sum() / len(gts))


@dataclass
class MapResult:
    per_threshold: dict[float, float]
    average: float  # mean over AVERAGE_THRESHOLDS

    def row(self, thresholds: Sequence[float] = THUMOS_THRESHOLDS) -> list[float]:
        return [self.per_threshold[t] for t in thresholds] + [self.average]


def _class_mean(proposals, gts, classes, thr, inclusive) -> float:
    return float(np.mean([average_precision(proposals, gts, c, thr, inclusive) for c in classes]))


def mean_ap(
    proposals: Sequence,
    ground_truth: Sequence[GroundTruthInstance],
    iou_thresholds: Iterable[float] = THUMOS_THRESHOLDS,
    inclusive: bool = True,
) -> MapResult:
    if not ground_truth:
        raise ValidationError("mean_ap needs at least one ground-truth instance")
    classes = sorted({g.class_id for g in ground_truth})
    thresholds = list(iou_thresholds)
    per = {t: _class_mean(proposals, ground_truth, classes, t, inclusive) for t in thresholds}
    avg_values = [per[t] if t in per else _class_mean(proposals, ground_truth, classes, t, inclusive)
                  for t in AVERAGE_THRESHOLDS]
    return MapResult(per, float(np.mean(avg_values)))


def format_map_table(
    rows: Sequence[tuple[str, MapResult]] | MapResult,
    thresholds: Sequence[float] = THUMOS_THRESHOLDS,
    label_header: str | None = None,
) -> str:
    """Tab-separated mAP table: ``mAP@0.1 ... mAP@0.7 AVG`` in percent-free fractions."""
    if isinstance(rows, MapResult):
        rows = [("", rows)]
        label_header = None
    header = [f"mAP@{t:g}" for t in thresholds] + ["AVG(0.1:0.1:0.5)"]
    if label_header is not None:
        header = [label_header] + header
    lines = ["\t".join(header)]
    for label, result in rows:
        values = [f"{v:.4f}" for v in result.row(thresholds)]
        lines.append("\t".join(([label] if label_header is not None else []) + values))
    return "\n".join(lines) + "\n"


def attention_auc(a: np.ndarray, segment_labels: np.ndarray) -> float:
    """ROC AUC of the attention as a foreground score (ties count one half).

    Returns NaN with a warning when only one class is present.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    labels = np.asarray(segment_labels).astype(bool).ravel()
    if a.shape != labels.shape:
        raise ValidationError(f"scores {a.shape} and labels {labels.shape} differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined: labels contain a single class", RuntimeWarning, stacklevel=2)
        return float("nan")
    ranks = rankdata(a)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
