"""Evaluation procedures for the three tasks.

Multi-label ranking is scored by mean average precision, overall and per
long-tail segment (head: more than 500 training samples, middle: 100 to 500
inclusive, tail: fewer than 100). Temporal grounding uses Recall@n at IoU
thresholds (strictly greater than the threshold counts) and mean IoU. Pose
uses PCK: a visible keypoint is correct when its distance to ground truth is
at most alpha times the larger bounding-box side (inclusive).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

HEAD_THRESHOLD = 500
TAIL_THRESHOLD = 100
POSE_KEYPOINT_COUNT = 23


@dataclass(frozen=True)
class SegmentThresholds:
    hi: int = HEAD_THRESHOLD
    lo: int = TAIL_THRESHOLD

    def __post_init__(self):
        if not self.hi > self.lo > 0:
            raise InputError(f"need hi > lo > 0, got hi={self.hi} lo={self.lo}")


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise InputError("interval endpoints must be finite")
        if self.start < 0 or self.start >= self.end:
            raise InputError(f"need 0 <= start < end, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class MetricReport:
    """Task scores plus the parameters they were computed with."""

    task: str
    scores: dict[str, float]
    per_class: dict[str, float] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {"task": self.task, "scores": self.scores,
               "per_class": self.per_class, "params": self.params}
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        rows = [("score", "value")]
        rows += [(k, f"{v:.4f}") for k, v in sorted(self.scores.items())]
        rows += [(f"[{k}]", f"{v:.4f}") for k, v in sorted(self.per_class.items())]
        width = max(len(r[0]) for r in rows)
        lines = [f"{self.task} report"]
        lines.append(f"{rows[0][0]:<{width}}  {rows[0][1]}")
        lines.append("-" * (width + 8))
        lines += [f"{k:<{width}}  {v}" for k, v in rows[1:]]
        return "\n".join(lines) + "\n"


def average_precision(scores, positives) -> float:
    """AP = mean precision at each positive's rank, scores sorted descending.

    Ties break by ascending original index so the value is deterministic.
    """
    scores = list(scores)
    positives = list(positives)
    if len(scores) != len(positives):
        raise InputError(f"{len(scores)} scores vs {len(positives)} labels")
    if not any(positives):
        raise InputError("average precision is undefined without a positive")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if positives[idx]:
            hits += 1
            total += hits / rank
    return total / hits


def multilabel_map(score_matrix, label_matrix, class_subset=None) -> tuple[float, dict]:
    """Mean AP over the subset's classes that have at least one positive.

    Returns (mAP, per-class dict); classes without positives are skipped and
    reported as None in the dict.
    """
    scores = np.asarray(score_matrix, dtype=float)
    labels = np.asarray(label_matrix, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise InputError(f"score matrix {scores.shape} vs labels {labels.shape}")
    n_classes = scores.shape[1]
    subset = range(n_classes) if class_subset is None else sorted(class_subset)
    if any(c < 0 or c >= n_classes for c in subset):
        raise InputError(f"class subset out of range for {n_classes} classes")
    per_class: dict[int, float | None] = {}
    values = []
    for c in subset:
        if labels[:, c].any():
            ap = average_precision(scores[:, c], labels[:, c])
            per_class[c] = ap
            values.append(ap)
        else:
            per_class[c] = None
    if not values:
        raise InputError("no class in the subset has a positive item")
    return float(np.mean(values)), per_class


def segment_classes(train_counts, thresholds: SegmentThresholds = SegmentThresholds()
                    ) -> tuple[set[int], set[int], set[int]]:
    """Partition class ids into (head, middle, tail) by training-sample count.

    Strictly more than ``hi`` is head; ``lo`` up to and including ``hi`` is
    middle; strictly fewer than ``lo`` is tail.
    """
    counts = list(train_counts)
    if any(c < 0 for c in counts):
        raise InputError("class counts must be nonnegative")
    head = {i for i, c in enumerate(counts) if c > thresholds.hi}
    middle = {i for i, c in enumerate(counts) if thresholds.lo <= c <= thresholds.hi}
    tail = {i for i, c in enumerate(counts) if c < thresholds.lo}
    return head, middle, tail


def temporal_iou(pred: Interval, gt: Interval) -> float:
    inter = min(pred.end, gt.end) - max(pred.start, gt.start)
    if inter <= 0:
        return 0.0
    union = pred.length + gt.length - inter
    return inter / union


def recall_at_n(ranked_preds, gts, n: int, mu: float) -> float:
    """Fraction of queries whose top-n predictions contain one with IoU
    strictly greater than ``mu``."""
    if n < 1:
        raise InputError(f"n must be at least 1, got {n}")
    preds = list(ranked_preds)
    truths = list(gts)
    if len(preds) != len(truths):
        raise InputError(f"{len(preds)} queries vs {len(truths)} ground truths")
    if not preds:
        raise InputError("recall over zero queries is undefined")
    correct = 0
    for query, gt in zip(preds, truths):
        if not query:
            raise InputError("every query needs at least one prediction")
        best = max(temporal_iou(p, gt) for p in query[:n])
        if best > mu:
            correct += 1
    return correct / len(preds)


def mean_iou(top1_preds, gts) -> float:
    preds = list(top1_preds)
    truths = list(gts)
    if len(preds) != len(truths) or not preds:
        raise InputError("mean IoU needs equally many (>=1) predictions and truths")
    return float(np.mean([temporal_iou(p, g) for p, g in zip(preds, truths)]))


def pck(pred_kps, gt_kps, visibility, bbox_hw, alpha: float = 0.05) -> float:
    """Fraction of visible keypoints within alpha * max(bbox height, width).

    The distance threshold is inclusive; occluded keypoints are skipped.
    """
    pred = np.asarray(pred_kps, dtype=float)
    gt = np.asarray(gt_kps, dtype=float)
    vis = np.asarray(visibility, dtype=bool)
    if pred.shape != (POSE_KEYPOINT_COUNT, 2) or gt.shape != (POSE_KEYPOINT_COUNT, 2):
        raise InputError(f"expected {POSE_KEYPOINT_COUNT} (x, y) keypoints per side, "
                         f"got {pred.shape} and {gt.shape}")
    if vis.shape != (POSE_KEYPOINT_COUNT,):
        raise InputError("visibility must flag each keypoint")
    if not vis.any():
        raise InputError("PCK is undefined with zero visible keypoints")
    height, width = bbox_hw
    if height <= 0 or width <= 0:
        raise InputError(f"bounding box extents must be positive, got {bbox_hw}")
    threshold = alpha * max(height, width)
    dists = np.linalg.norm(pred[vis] - gt[vis], axis=1)
    return float(np.mean(dists <= threshold))


def accuracy(pred_labels, gt_labels) -> float:
    preds = list(pred_labels)
    truths = list(gt_labels)
    if len(preds) != len(truths) or not preds:
        raise InputError("accuracy needs equally many (>=1) predictions and truths")
    return sum(p == t for p, t in zip(preds, truths)) / len(preds)
