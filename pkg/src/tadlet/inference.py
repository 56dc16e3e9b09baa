"""Sliding-window inference over untrimmed videos and the detections file."""

from __future__ import annotations

import json
import logging
import math
import sys

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from scipy.special import expit
from tqdm import tqdm

from .anchors import AnchorSet, decode_arrays, generate_anchors
from .augment import AnnotatedClip, AugmentPipeline, Clip
from .config import AnchorConfig, AugmentPolicy, InferConfig
from .errors import FormatError
from .helpers import atomic_write_text
from .network import TEMPORAL_POOL, Detector
from .segments import Detection, Segment, suppress_arrays
from .types import VideoId


logger = logging.getLogger(__name__)


def plan_windows(video_len: int, cfg: InferConfig) -> List[int]:
    """Window starts every `window * (1 - overlap)` frames plus an end-aligned last window."""
    if video_len < 1:
        raise ValueError(f"video_len must be >= 1, got {video_len}")
    if video_len <= cfg.window:
        return [0]
    starts = list(range(0, video_len - cfg.window + 1, cfg.stride))
    if starts[-1] + cfg.window < video_len:
        starts.append(video_len - cfg.window)
    return starts


def _window_input(video: AnnotatedClip, start: int, window: int, pipeline: AugmentPipeline) -> Dict[str, np.ndarray]:
    if video.features is not None:
        lo = start // video.feature_stride
        length = window // video.feature_stride
        feats = np.asarray(video.features[:, lo:lo + length], dtype=np.float64)
        if feats.shape[1] < length:
            feats = np.pad(feats, ((0, 0), (0, length - feats.shape[1])))
        return {"features": feats[None]}
    if video.pixels is None:
        raise FormatError(f"{video.video_id} has neither features nor frames")
    frames = np.asarray(video.pixels[:, start:start + window], dtype=np.float32)
    if frames.shape[1] < window:
        frames = np.pad(frames, ((0, 0), (0, window - frames.shape[1]), (0, 0), (0, 0)))
    # rng is unused by the evaluation path
    clip = pipeline.spatial(Clip(frames, video.fps), np.random.default_rng(0))
    return {"pixels": np.asarray(clip.pixels, dtype=np.float64)[None]}


def detect_video(
    video: AnnotatedClip,
    model: Detector,
    cfg: InferConfig,
    anchor_cfg: AnchorConfig,
    policy: Optional[AugmentPolicy] = None,
    anchors: Optional[AnchorSet] = None,
) -> List[Detection]:
    """Score every window, lift to video frames, then filter, suppress per class and truncate."""
    anchors = anchors or generate_anchors(anchor_cfg, cfg.window)
    pipeline = AugmentPipeline(policy or AugmentPolicy(), train=False)
    model.eval()

    segments: List[np.ndarray] = []
    scores: List[np.ndarray] = []
    classes: List[np.ndarray] = []
    for start in plan_windows(video.num_frames, cfg):
        if video.features is not None:
            # feature windows begin on a feature step
            start = int(math.ceil(start / video.feature_stride) * video.feature_stride)
        output = model(**_window_input(video, start, cfg.window, pipeline))
        cls, reg = model.flatten(output)
        probs = expit(cls[0])
        decoded = np.clip(decode_arrays(anchors.segments, reg[0]) + start, 0.0, float(video.num_frames))
        valid = decoded[:, 1] > decoded[:, 0]
        anchor_idx, class_idx = np.nonzero((probs >= cfg.score_threshold) & valid[:, None])
        segments.append(decoded[anchor_idx])
        scores.append(probs[anchor_idx, class_idx])
        classes.append(class_idx)
        logger.debug("%s window @%d: %d candidates", video.video_id, start, anchor_idx.size)

    all_segments = np.concatenate(segments) if segments else np.zeros((0, 2))
    all_scores = np.concatenate(scores) if scores else np.zeros(0)
    all_classes = np.concatenate(classes) if classes else np.zeros(0, dtype=np.int64)

    kept_segments, kept_scores, kept_classes = [], [], []
    for k in np.unique(all_classes):
        mask = all_classes == k
        segs, scs, _ = suppress_arrays(all_segments[mask], all_scores[mask], cfg.suppress_threshold, cfg.suppress_mode)
        kept_segments.append(segs)
        kept_scores.append(scs)
        kept_classes.append(np.full(len(scs), k, dtype=np.int64))
    if not kept_scores:
        return []

    segs = np.concatenate(kept_segments)
    scs = np.concatenate(kept_scores)
    cls_ids = np.concatenate(kept_classes)
    order = np.lexsort((cls_ids, segs[:, 0], -scs))[:cfg.max_detections_per_video]
    return [
        Detection(Segment(float(segs[i, 0]), float(segs[i, 1])), float(min(scs[i], 1.0)), int(cls_ids[i]))
        for i in order
    ]


def detect_dataset(
    videos: Sequence[AnnotatedClip],
    model: Detector,
    cfg: InferConfig,
    anchor_cfg: AnchorConfig,
    policy: Optional[AugmentPolicy] = None,
    progress: Optional[bool] = None,
) -> Dict[VideoId, List[Detection]]:
    anchors = generate_anchors(anchor_cfg, cfg.window)
    if progress is None:
        progress = sys.stderr.isatty()
    results: Dict[VideoId, List[Detection]] = {}
    for video in tqdm(videos, desc="videos", unit="video", disable=not progress):
        results[video.video_id] = detect_video(video, model, cfg, anchor_cfg, policy, anchors)
    logger.info("detected %d segments in %d videos", sum(map(len, results.values())), len(results))
    return results


# == Feature extraction ========================================================


def extract_features(video: AnnotatedClip, model: Detector, policy: AugmentPolicy, chunk: int = 768) -> np.ndarray:
    """Backbone + SRM over a frame video, `(C_b, ceil(T / 8))`, computed `chunk` frames at a time."""
    if video.pixels is None:
        raise FormatError(f"{video.video_id} has no frames to extract features from")
    chunk = max(TEMPORAL_POOL, chunk - chunk % TEMPORAL_POOL)
    pipeline = AugmentPipeline(policy, train=False)
    model.eval()
    steps = int(math.ceil(video.num_frames / TEMPORAL_POOL))
    parts = []
    for start in range(0, steps * TEMPORAL_POOL, chunk):
        frames = np.asarray(video.pixels[:, start:start + chunk], dtype=np.float32)
        pad = (-frames.shape[1]) % TEMPORAL_POOL
        if pad:
            frames = np.pad(frames, ((0, 0), (0, pad), (0, 0), (0, 0)))
        clip = pipeline.spatial(Clip(frames, video.fps), np.random.default_rng(0))
        parts.append(model.extract(np.asarray(clip.pixels, dtype=np.float64)[None])[0])
    return np.concatenate(parts, axis=1)[:, :steps]


# == Detections file ===========================================================


def detections_to_json(detections: Mapping[VideoId, Sequence[Detection]], fps: Mapping[VideoId, float]) -> Dict[str, Any]:
    doc: Dict[str, Any] = {}
    for video_id, dets in detections.items():
        rate = fps.get(video_id)
        rows = []
        for det in dets:
            row: Dict[str, Any] = {
                "class": det.class_id,
                "start_frame": det.segment.start,
                "end_frame": det.segment.end,
                "score": det.score,
            }
            if rate:
                row["start_sec"] = det.segment.start / rate
                row["end_sec"] = det.segment.end / rate
            rows.append(row)
        doc[video_id] = rows
    return doc


def write_detections(path: str | Path, detections: Mapping[VideoId, Sequence[Detection]], fps: Mapping[VideoId, float]) -> Path:
    target = atomic_write_text(path, json.dumps(detections_to_json(detections, fps), indent=2))
    logger.info("detections written to %s", target)
    return target


def read_detections(path: str | Path) -> Dict[VideoId, List[Detection]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must map video ids to detection lists")
    results: Dict[VideoId, List[Detection]] = {}
    for video_id, rows in doc.items():
        if not isinstance(rows, list):
            raise FormatError(f"{path}: {video_id} must hold a list")
        dets = []
        for i, row in enumerate(rows):
            try:
                dets.append(Detection(Segment(float(row["start_frame"]), float(row["end_frame"])),
                                      float(row["score"]), int(row["class"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: {video_id}[{i}]: {exc}") from exc
        results[video_id] = dets
    return results
