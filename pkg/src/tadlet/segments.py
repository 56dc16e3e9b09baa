"""Segment arithmetic: tIoU, the temporal DIoU loss and its gradient, NMS / NMW.

Scalar functions take `Segment` objects; the `*_arrays` forms operate on
`(N, 2)` arrays of `(start, end)` rows and are what the hot paths use.
"""

from __future__ import annotations

import math

from dataclasses import dataclass
from enum import StrEnum
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import InvalidSegmentError
from .types import ClassId, FloatArray, IntArray, SegmentArray


@dataclass(frozen=True, slots=True)
class Segment:
    """Half-open temporal interval in frames."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise InvalidSegmentError(f"Segment endpoints must be finite, got [{self.start}, {self.end}]")
        if not self.end > self.start:
            raise InvalidSegmentError(f"Segment needs end > start, got [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def shift(self, offset: float) -> Segment:
        return Segment(self.start + offset, self.end + offset)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.start, self.end)

    @classmethod
    def from_center(cls, center: float, length: float) -> Segment:
        return cls(center - 0.5 * length, center + 0.5 * length)


@dataclass(frozen=True, slots=True)
class ScoredSegment:
    """A segment with a confidence and a class, e.g. one detection."""

    segment: Segment
    score: float
    class_id: ClassId

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise InvalidSegmentError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise InvalidSegmentError(f"class_id must be non-negative, got {self.class_id}")


# Detections are scored segments in absolute video frames.
Detection = ScoredSegment


class LabeledSegment(NamedTuple):
    """A ground-truth segment and its class."""

    segment: Segment
    class_id: ClassId


class SuppressMode(StrEnum):
    NMS = "nms"
    NMW = "nmw"


def as_array(segments: Sequence[Segment]) -> SegmentArray:
    if not segments:
        return np.zeros((0, 2), dtype=np.float64)
    return np.array([s.as_tuple() for s in segments], dtype=np.float64)


# -- tIoU ------------------------------------------------------------------------


def tiou_matrix(a: SegmentArray, b: SegmentArray) -> FloatArray:
    """Pairwise tIoU between rows of `a` (N, 2) and `b` (M, 2), shape (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0, None,
    )
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    return inter / union


def tiou(a: Segment, b: Segment) -> float:
    """Temporal intersection over union of two segments."""
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    return inter / union


# -- temporal DIoU loss --------------------------------------------------------


def diou_loss_arrays(pred: SegmentArray, gt: SegmentArray) -> Tuple[FloatArray, FloatArray]:
    """Row-wise `1 - tIoU + rho^2 / u^2` and its gradient w.r.t. `pred` endpoints.

    Returns `(loss (N,), grad (N, 2))`. At max/min ties the branch taking the
    predicted endpoint is used, which gives a one-sided subgradient.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    s, e = pred[:, 0], pred[:, 1]
    gs, ge = gt[:, 0], gt[:, 1]

    inner_start_is_pred = s >= gs
    inner_end_is_pred = e <= ge
    raw_inter = np.where(inner_end_is_pred, e, ge) - np.where(inner_start_is_pred, s, gs)
    overlapping = raw_inter > 0.0
    inter = np.where(overlapping, raw_inter, 0.0)
    union = (e - s) + (ge - gs) - inter
    iou = inter / union

    outer_start_is_pred = s <= gs
    outer_end_is_pred = e >= ge
    enclose = np.where(outer_end_is_pred, e, ge) - np.where(outer_start_is_pred, s, gs)
    delta = 0.5 * (s + e) - 0.5 * (gs + ge)
    penalty = delta * delta / (enclose * enclose)
    loss = 1.0 - iou + penalty

    d_inter_ds = np.where(overlapping & inner_start_is_pred, -1.0, 0.0)
    d_inter_de = np.where(overlapping & inner_end_is_pred, 1.0, 0.0)
    d_union_ds = -1.0 - d_inter_ds
    d_union_de = 1.0 - d_inter_de
    d_iou_ds = (d_inter_ds * union - inter * d_union_ds) / (union * union)
    d_iou_de = (d_inter_de * union - inter * d_union_de) / (union * union)

    d_enc_ds = np.where(outer_start_is_pred, -1.0, 0.0)
    d_enc_de = np.where(outer_end_is_pred, 1.0, 0.0)
    enc2 = enclose * enclose
    # d(delta^2)/ds = d(delta^2)/de = delta
    d_pen_ds = delta / enc2 - 2.0 * delta * delta * d_enc_ds / (enc2 * enclose)
    d_pen_de = delta / enc2 - 2.0 * delta * delta * d_enc_de / (enc2 * enclose)

    grad = np.stack([d_pen_ds - d_iou_ds, d_pen_de - d_iou_de], axis=1)
    return loss, grad


def diou_loss(pred: Segment, gt: Segment) -> Tuple[float, Tuple[float, float]]:
    """Temporal DIoU loss of `pred` against `gt` and `d loss / d (pred.start, pred.end)`."""
    loss, grad = diou_loss_arrays(np.array([pred.as_tuple()]), np.array([gt.as_tuple()]))
    return float(loss[0]), (float(grad[0, 0]), float(grad[0, 1]))


# -- suppression ---------------------------------------------------------------


def suppress_arrays(
    segments: SegmentArray,
    scores: FloatArray,
    threshold: float,
    mode: SuppressMode | str = SuppressMode.NMW,
    class_ids: IntArray | None = None,
) -> Tuple[SegmentArray, FloatArray, IntArray]:
    """Greedy suppression over one class.

    Returns `(segments, scores, seeds)` sorted by descending score, where
    `seeds` indexes the input row that seeded each output. Ties in score go to
    the lower start, then the lower class id.
    """
    mode = SuppressMode(mode)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(segments) == 0:
        return segments.copy(), scores.copy(), np.zeros(0, dtype=np.int64)
    classes = np.zeros(len(scores), dtype=np.int64) if class_ids is None else np.asarray(class_ids)
    # lexsort: last key is primary
    order = np.lexsort((classes, segments[:, 0], -scores))

    remaining = order
    out_segments: List[FloatArray] = []
    out_scores: List[float] = []
    seeds: List[int] = []
    while remaining.size:
        seed = remaining[0]
        overlaps = tiou_matrix(segments[seed:seed + 1], segments[remaining])[0]
        overlaps[0] = 1.0
        in_cluster = overlaps >= threshold
        members = remaining[in_cluster]
        if mode is SuppressMode.NMW and members.size > 1:
            weights = scores[members] * overlaps[in_cluster]
            total = weights.sum()
            merged = (weights[:, None] * segments[members]).sum(axis=0) / total if total > 0 else segments[seed]
        else:
            merged = segments[seed]
        out_segments.append(merged)
        out_scores.append(float(scores[seed]))
        seeds.append(int(seed))
        remaining = remaining[~in_cluster]

    return np.array(out_segments), np.array(out_scores), np.array(seeds, dtype=np.int64)


def suppress(candidates: Sequence[ScoredSegment], threshold: float, mode: SuppressMode | str = SuppressMode.NMW) -> List[ScoredSegment]:
    """NMS or NMW over candidates of one class, sorted by descending score."""
    if not candidates:
        return []
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"suppression threshold must lie in (0, 1), got {threshold}")
    segments = as_array([c.segment for c in candidates])
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    classes = np.array([c.class_id for c in candidates], dtype=np.int64)
    kept, kept_scores, seeds = suppress_arrays(segments, scores, threshold, mode, classes)
    return [
        ScoredSegment(Segment(float(seg[0]), float(seg[1])), float(score), candidates[int(i)].class_id)
        for seg, score, i in zip(kept, kept_scores, seeds)
    ]
