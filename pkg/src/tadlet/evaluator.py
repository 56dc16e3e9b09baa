"""Detection mAP at several tIoU thresholds, THUMOS14 style."""

from __future__ import annotations

import csv
import io
import logging

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import UnknownClassError
from .helpers import atomic_write_text
from .segments import Detection, LabeledSegment, Segment, as_array, tiou_matrix
from .types import ClassId, FloatArray, SegmentArray, VideoId


logger = logging.getLogger(__name__)

THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def match_detections(segments: SegmentArray, scores: FloatArray, gts: SegmentArray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order.

    Returns `(order, is_tp)`: the processing order and whether each processed
    detection matched. A detection takes the unmatched gt of highest tIoU (the
    earlier gt on ties) when that tIoU reaches `threshold`.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    is_tp = np.zeros(len(order), dtype=bool)
    if len(gts) == 0 or len(order) == 0:
        return order, is_tp
    overlaps = tiou_matrix(np.asarray(segments)[order], gts)
    taken = np.zeros(len(gts), dtype=bool)
    for row in range(len(order)):
        candidates = np.where(taken, -1.0, overlaps[row])
        best = int(np.argmax(candidates))
        if candidates[best] >= threshold:
            taken[best] = True
            is_tp[row] = True
    return order, is_tp


def precision_envelope_ap(is_tp: np.ndarray, num_gts: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if num_gts == 0 or is_tp.size == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / num_gts
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(detections: Sequence[Detection], gts: Sequence[Segment], threshold: float) -> Optional[float]:
    """AP of one class in one video; `None` when there are neither detections nor gts."""
    if not detections and not gts:
        return None
    if not gts:
        return 0.0
    segs = as_array([d.segment for d in detections])
    scores = np.array([d.score for d in detections], dtype=np.float64)
    _, is_tp = match_detections(segs, scores, as_array(gts), threshold)
    return precision_envelope_ap(is_tp, len(gts))


def pooled_average_precision(
    detections: Mapping[VideoId, Sequence[Detection]],
    gts: Mapping[VideoId, Sequence[Segment]],
    threshold: float,
) -> Tuple[Optional[float], float]:
    """AP and recall of one class with detections pooled over videos; matching stays per video."""
    num_gts = sum(len(v) for v in gts.values())
    all_scores: List[FloatArray] = []
    all_tp: List[np.ndarray] = []
    for video_id in sorted(set(detections) | set(gts)):
        dets = detections.get(video_id, ())
        if not dets:
            continue
        segs = as_array([d.segment for d in dets])
        scores = np.array([d.score for d in dets], dtype=np.float64)
        order, is_tp = match_detections(segs, scores, as_array(gts.get(video_id, ())), threshold)
        all_scores.append(scores[order])
        all_tp.append(is_tp)
    if not all_scores and num_gts == 0:
        return None, 0.0
    if not all_scores:
        return 0.0, 0.0
    scores = np.concatenate(all_scores)
    is_tp = np.concatenate(all_tp)[np.argsort(-scores, kind="stable")]
    recall = float(is_tp.sum()) / num_gts if num_gts else 0.0
    return precision_envelope_ap(is_tp, num_gts), recall


@dataclass
class EvalReport:
    """Per-class AP and recall per threshold; classes with neither gts nor detections hold `None`."""

    thresholds: Tuple[float, ...]
    num_classes: int
    ap: Dict[float, Dict[ClassId, Optional[float]]] = field(default_factory=dict)
    recall: Dict[float, Dict[ClassId, float]] = field(default_factory=dict)

    def mean_ap(self, threshold: float) -> float:
        values = [v for v in self.ap[threshold].values() if v is not None]
        return float(np.mean(values)) if values else 0.0

    @property
    def map_per_threshold(self) -> Dict[float, float]:
        return {thr: self.mean_ap(thr) for thr in self.thresholds}

    @property
    def average_map(self) -> float:
        return float(np.mean([self.mean_ap(t) for t in self.thresholds])) if self.thresholds else 0.0

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["class", "threshold", "ap", "recall"])
        for thr in self.thresholds:
            for k in range(self.num_classes):
                ap = self.ap[thr][k]
                writer.writerow([k, f"{thr:g}", "" if ap is None else f"{ap:.6f}", f"{self.recall[thr][k]:.6f}"])
        for thr in self.thresholds:
            writer.writerow([f"mAP@{thr:g}", f"{thr:g}", f"{self.mean_ap(thr):.6f}", ""])
        writer.writerow(["average_mAP", "", f"{self.average_map:.6f}", ""])
        return buffer.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())

    def summary(self) -> str:
        parts = [f"mAP@{t:g}={self.mean_ap(t):.4f}" for t in self.thresholds]
        return " ".join(parts + [f"avg={self.average_map:.4f}"])


def evaluate(
    detections: Mapping[VideoId, Sequence[Detection]],
    ground_truth: Mapping[VideoId, Sequence[LabeledSegment]],
    num_classes: int,
    thresholds: Sequence[float] = THRESHOLDS,
) -> EvalReport:
    """Per-class AP pooled over videos, unweighted class mean per threshold, mean over thresholds.

    Detections of videos without annotations count as false positives.
    """
    for video_id, dets in detections.items():
        for det in dets:
            if not 0 <= det.class_id < num_classes:
                raise UnknownClassError(f"{video_id}: detection class {det.class_id} outside [0, {num_classes})")

    report = EvalReport(tuple(float(t) for t in thresholds), num_classes)
    for k in range(num_classes):
        class_dets = {v: [d for d in dets if d.class_id == k] for v, dets in detections.items()}
        class_gts = {v: [g.segment for g in gts if g.class_id == k] for v, gts in ground_truth.items()}
        for thr in report.thresholds:
            ap, recall = pooled_average_precision(class_dets, class_gts, thr)
            report.ap.setdefault(thr, {})[k] = ap
            report.recall.setdefault(thr, {})[k] = recall

    excluded = [k for k in range(num_classes) if report.ap[report.thresholds[0]][k] is None] if report.thresholds else []
    if excluded:
        logger.warning("classes %s have neither ground truths nor detections; excluded from the mean", excluded)
    logger.info("evaluation: %s", report.summary())
    return report
