"""Pyramid anchors: generation, tIoU-band assignment, offset coding and the
positives-per-ground-truth analysis."""

from __future__ import annotations

import csv
import io
import logging
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np

from .config import AnchorConfig
from .errors import ConfigurationError, NonFiniteError
from .helpers import atomic_write_text
from .segments import LabeledSegment, Segment, as_array, tiou_matrix
from .types import FloatArray, IntArray, SegmentArray


if TYPE_CHECKING:
    from .augment import AnnotatedClip


logger = logging.getLogger(__name__)

NEGATIVE = -1
IGNORED = -2

SCALE_BUCKETS = ("small", "medium", "large")


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """All anchors of one clip length, flattened level by level.

    Within a level anchors are ordered position-major, then scale, which is the
    order the prediction head emits them in.
    """

    segments: SegmentArray
    level_offsets: Tuple[int, ...]
    strides: Tuple[int, ...]
    positions: Tuple[int, ...]
    num_scales: int
    clip_len: int

    def __len__(self) -> int:
        return int(self.segments.shape[0])

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def level(self, index: int) -> SegmentArray:
        """Anchors of one level, shape (positions, scales, 2)."""
        lo, hi = self.level_offsets[index], self.level_offsets[index + 1]
        return self.segments[lo:hi].reshape(self.positions[index], self.num_scales, 2)

    def level_of(self, flat_index: int) -> int:
        return int(np.searchsorted(self.level_offsets, flat_index, side="right") - 1)

    def segment(self, flat_index: int) -> Segment:
        start, end = self.segments[flat_index]
        return Segment(float(start), float(end))


def generate_anchors(cfg: AnchorConfig, clip_len: int) -> AnchorSet:
    """Anchors centered at `(i + 0.5) * stride` with lengths `base_size * scale`; not clipped."""
    if clip_len <= 0 or clip_len % cfg.max_stride:
        raise ConfigurationError(f"clip_len {clip_len} must be a positive multiple of the largest stride {cfg.max_stride}")

    scales = np.asarray(cfg.scales_per_level, dtype=np.float64)
    levels: List[FloatArray] = []
    offsets = [0]
    positions = []
    for stride, base in zip(cfg.strides, cfg.base_sizes):
        count = clip_len // stride
        centers = (np.arange(count, dtype=np.float64) + 0.5) * stride
        lengths = base * scales
        starts = centers[:, None] - 0.5 * lengths[None, :]
        ends = centers[:, None] + 0.5 * lengths[None, :]
        levels.append(np.stack([starts, ends], axis=-1).reshape(-1, 2))
        positions.append(count)
        offsets.append(offsets[-1] + count * len(scales))

    segments = np.concatenate(levels, axis=0)
    segments.setflags(write=False)
    return AnchorSet(
        segments=segments,
        level_offsets=tuple(offsets),
        strides=tuple(int(s) for s in cfg.strides),
        positions=tuple(positions),
        num_scales=len(scales),
        clip_len=clip_len,
    )


# -- assignment ----------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentResult:
    """Per-anchor labels: gt index (positive), NEGATIVE or IGNORED."""

    labels: IntArray
    max_tiou: FloatArray
    positive_counts: IntArray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORED

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_arrays(anchors: SegmentArray, gts: SegmentArray, pos_thr: float, neg_thr: float) -> AssignmentResult:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if gts.shape[0] == 0:
        return AssignmentResult(
            labels=np.full(anchors.shape[0], NEGATIVE, dtype=np.int64),
            max_tiou=np.zeros(anchors.shape[0]),
            positive_counts=np.zeros(0, dtype=np.int64),
        )

    overlaps = tiou_matrix(anchors, gts)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(anchors.shape[0]), best_gt]
    labels = np.full(anchors.shape[0], IGNORED, dtype=np.int64)
    labels[best < neg_thr] = NEGATIVE
    positive = best >= pos_thr
    labels[positive] = best_gt[positive]
    counts = np.bincount(best_gt[positive], minlength=gts.shape[0]).astype(np.int64)
    return AssignmentResult(labels=labels, max_tiou=best, positive_counts=counts)


def assign(anchors: AnchorSet, gts: Sequence[LabeledSegment | Tuple[Segment, int]], cfg: AnchorConfig) -> AssignmentResult:
    """Positive (to the argmax gt) iff best tIoU >= pos_thr, negative iff < neg_thr, else ignored."""
    return assign_arrays(anchors.segments, as_array([g[0] for g in gts]), cfg.pos_thr, cfg.neg_thr)


# -- offset coding -------------------------------------------------------------


def decode_arrays(anchors: SegmentArray, offsets: FloatArray) -> SegmentArray:
    """Apply `(dc, dl)` rows: center moves by `dc * length`, length scales by `exp(dl)`."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(offsets)):
        raise NonFiniteError("decode offsets must be finite", {"non_finite": int((~np.isfinite(offsets)).sum())})
    length = anchors[:, 1] - anchors[:, 0]
    center = 0.5 * (anchors[:, 0] + anchors[:, 1]) + offsets[:, 0] * length
    with np.errstate(over="ignore"):
        new_length = length * np.exp(offsets[:, 1])
    if not np.all(np.isfinite(new_length)):
        raise NonFiniteError("decoded length overflows float64", {"max_dl": float(offsets[:, 1].max())})
    return np.stack([center - 0.5 * new_length, center + 0.5 * new_length], axis=1)


def decode_backward(anchors: SegmentArray, offsets: FloatArray, grad_segments: FloatArray) -> FloatArray:
    """Chain `d loss / d (start, end)` back to `d loss / d (dc, dl)`."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    length = anchors[:, 1] - anchors[:, 0]
    dl = offsets[:, 1]
    half = 0.5 * length * np.exp(dl)
    g_start, g_end = grad_segments[:, 0], grad_segments[:, 1]
    return np.stack([length * (g_start + g_end), half * (g_end - g_start)], axis=1)


def encode_arrays(anchors: SegmentArray, targets: SegmentArray) -> FloatArray:
    """Inverse of `decode_arrays`."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    length = anchors[:, 1] - anchors[:, 0]
    dc = (0.5 * (targets[:, 0] + targets[:, 1]) - 0.5 * (anchors[:, 0] + anchors[:, 1])) / length
    dl = np.log((targets[:, 1] - targets[:, 0]) / length)
    return np.stack([dc, dl], axis=1)


def decode(anchor: Segment, offsets: Tuple[float, float]) -> Segment:
    start, end = decode_arrays(np.array([anchor.as_tuple()]), np.array([offsets], dtype=np.float64))[0]
    return Segment(float(start), float(end))


def encode(anchor: Segment, target: Segment) -> Tuple[float, float]:
    dc, dl = encode_arrays(np.array([anchor.as_tuple()]), np.array([target.as_tuple()]))[0]
    return float(dc), float(dl)


# -- positives per ground truth ------------------------------------------------


def scale_bucket(length_sec: float, small_max_sec: float = 2.5, medium_max_sec: float = 6.0) -> str:
    if length_sec <= small_max_sec:
        return "small"
    if length_sec <= medium_max_sec:
        return "medium"
    return "large"


@dataclass
class AssignmentHistogram:
    """Positives-per-gt counts grouped by gt scale bucket."""

    counts: Dict[str, List[int]] = field(default_factory=lambda: {b: [] for b in SCALE_BUCKETS})

    @property
    def is_empty(self) -> bool:
        return not any(self.counts.values())

    def mean(self, bucket: str | None = None) -> float:
        values = self.counts[bucket] if bucket else [c for v in self.counts.values() for c in v]
        return float(np.mean(values)) if values else 0.0

    def table(self) -> List[Tuple[str, int, float, float]]:
        """Rows `(scale_bucket, positives_per_gt, pdf, cdf)`."""
        rows: List[Tuple[str, int, float, float]] = []
        for bucket in SCALE_BUCKETS:
            values = np.asarray(self.counts[bucket], dtype=np.int64)
            if values.size == 0:
                continue
            freq = np.bincount(values) / values.size
            cdf = np.cumsum(freq)
            for k, (p, c) in enumerate(zip(freq, cdf)):
                rows.append((bucket, k, float(p), float(c)))
        return rows

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["scale_bucket", "positives_per_gt", "pdf", "cdf"])
        for bucket, k, pdf, cdf in self.table():
            writer.writerow([bucket, k, f"{pdf:.6f}", f"{cdf:.6f}"])
        return buffer.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.to_csv())

    def plot(self, path: str | Path, title: str = "") -> Path:
        """PDF and CDF of positives per gt, one curve per scale bucket."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax_cdf, ax_pdf) = plt.subplots(1, 2, figsize=(10, 4))
        rows = self.table()
        for bucket in SCALE_BUCKETS:
            ks = [r[1] for r in rows if r[0] == bucket]
            if not ks:
                continue
            ax_pdf.plot(ks, [r[2] for r in rows if r[0] == bucket], marker="o", label=bucket)
            ax_cdf.step(ks, [r[3] for r in rows if r[0] == bucket], where="post", label=bucket)
        ax_cdf.set(xlabel="positives per ground truth", ylabel="CDF")
        ax_pdf.set(xlabel="positives per ground truth", ylabel="PDF")
        ax_cdf.legend()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(target)
        plt.close(fig)
        return target


def assignment_histogram(
    dataset: Sequence[AnnotatedClip],
    cfg: AnchorConfig,
    small_max_sec: float = 2.5,
    medium_max_sec: float = 6.0,
) -> AssignmentHistogram:
    """Count the positives every gt receives, over anchors of each clip's padded length."""
    histogram = AssignmentHistogram()
    cache: Dict[int, AnchorSet] = {}
    for clip in dataset:
        if not clip.gts:
            continue
        padded = int(math.ceil(clip.num_frames / cfg.max_stride) * cfg.max_stride)
        if padded not in cache:
            cache[padded] = generate_anchors(cfg, padded)
        result = assign(cache[padded], clip.gts, cfg)
        for gt, count in zip(clip.gts, result.positive_counts):
            bucket = scale_bucket(gt.segment.length / clip.fps, small_max_sec, medium_max_sec)
            histogram.counts[bucket].append(int(count))
    if histogram.is_empty:
        logger.warning("assignment histogram is empty: no ground truths in %d clips", len(dataset))
    return histogram
