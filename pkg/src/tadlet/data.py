"""Annotation and feature files, the synthetic dataset generator, and the dataset directory.

Directory layout::

    annotations_train.json, annotations_test.json
    features/<video_id>.tadf    (feature mode)
    frames/<video_id>.npy       (pixel mode, uint8 (3, T, H, W))
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import sys

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tqdm import tqdm

from .augment import AnnotatedClip
from .config import SynthSpec
from .errors import AnnotationSchemaError, BadMagicError, FormatError, InfeasiblePackingError, TruncatedPayloadError, UnsupportedVersionError
from .helpers import atomic_write_bytes, atomic_write_text
from .network import TEMPORAL_POOL
from .segments import LabeledSegment, Segment
from .types import VideoId


logger = logging.getLogger(__name__)

SPLITS = ("train", "test")

FEATURE_MAGIC = b"TADF"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIII")


# == Annotations ===============================================================


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: VideoId
    num_frames: int
    fps: float
    instances: Tuple[LabeledSegment, ...] = ()


@dataclass(frozen=True)
class AnnotationFile:
    videos: Tuple[VideoAnnotation, ...]
    num_classes: int

    def ground_truth(self) -> Dict[VideoId, List[LabeledSegment]]:
        return {v.video_id: list(v.instances) for v in self.videos}

    def fps(self) -> Dict[VideoId, float]:
        return {v.video_id: v.fps for v in self.videos}


def annotations_to_json(annotations: AnnotationFile) -> Dict[str, Any]:
    return {
        "num_classes": annotations.num_classes,
        "videos": [
            {
                "id": video.video_id,
                "num_frames": video.num_frames,
                "fps": video.fps,
                "instances": [
                    {"class": inst.class_id, "start_frame": inst.segment.start, "end_frame": inst.segment.end}
                    for inst in video.instances
                ],
            }
            for video in annotations.videos
        ],
    }


def _schema(condition: bool, source: object, where: str, message: str) -> None:
    if not condition:
        raise AnnotationSchemaError(f"{source}: {where}: {message}")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def annotations_from_json(doc: Any, source: object = "<json>") -> AnnotationFile:
    """Validate a parsed annotation document; errors name the JSON path."""
    _schema(isinstance(doc, dict), source, "$", "document must be an object")
    num_classes = doc.get("num_classes")
    _schema(isinstance(num_classes, int) and not isinstance(num_classes, bool) and num_classes >= 1,
            source, "$.num_classes", f"must be an integer >= 1, got {num_classes!r}")
    videos_doc = doc.get("videos")
    _schema(isinstance(videos_doc, list), source, "$.videos", "must be a list")

    videos = []
    seen = set()
    for i, entry in enumerate(videos_doc):
        where = f"$.videos[{i}]"
        _schema(isinstance(entry, dict), source, where, "must be an object")
        video_id = entry.get("id")
        _schema(isinstance(video_id, str) and bool(video_id), source, f"{where}.id", "must be a non-empty string")
        _schema(video_id not in seen, source, f"{where}.id", f"duplicate video id {video_id!r}")
        seen.add(video_id)
        num_frames = entry.get("num_frames")
        _schema(isinstance(num_frames, int) and not isinstance(num_frames, bool) and num_frames >= 1,
                source, f"{where}.num_frames", f"must be an integer >= 1, got {num_frames!r}")
        fps = entry.get("fps")
        _schema(_is_number(fps) and fps > 0, source, f"{where}.fps", f"must be a positive number, got {fps!r}")
        instances_doc = entry.get("instances", [])
        _schema(isinstance(instances_doc, list), source, f"{where}.instances", "must be a list")

        instances = []
        for j, inst in enumerate(instances_doc):
            at = f"{where}.instances[{j}]"
            _schema(isinstance(inst, dict), source, at, "must be an object")
            cls, start, end = inst.get("class"), inst.get("start_frame"), inst.get("end_frame")
            _schema(isinstance(cls, int) and not isinstance(cls, bool) and 0 <= cls < num_classes,
                    source, f"{at}.class", f"must be an integer in [0, {num_classes}), got {cls!r}")
            _schema(_is_number(start) and _is_number(end), source, at, "start_frame and end_frame must be finite numbers")
            _schema(0 <= start < end <= num_frames, source, at,
                    f"need 0 <= start_frame < end_frame <= num_frames, got [{start}, {end}] with {num_frames} frames")
            instances.append(LabeledSegment(Segment(float(start), float(end)), cls))
        videos.append(VideoAnnotation(video_id, num_frames, float(fps), tuple(instances)))
    return AnnotationFile(tuple(videos), num_classes)


def save_annotations(path: str | Path, annotations: AnnotationFile) -> Path:
    return atomic_write_text(path, json.dumps(annotations_to_json(annotations), indent=2) + "\n")


def load_annotations(path: str | Path) -> AnnotationFile:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationSchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise AnnotationSchemaError(f"{path}: not UTF-8 text at byte {exc.start}") from exc
    return annotations_from_json(doc, source=path)


# == Feature files =============================================================


def encode_features(features: np.ndarray) -> bytes:
    data = np.asarray(features)
    if data.ndim != 2:
        raise FormatError(f"feature sequence must be (C, T), got {data.shape}")
    channels, length = data.shape
    return FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, channels, length) + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_features(payload: bytes, source: object = "<bytes>") -> np.ndarray:
    if payload[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: expected magic {FEATURE_MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < FEATURE_HEADER.size:
        raise TruncatedPayloadError(source, FEATURE_HEADER.size, len(payload))
    _, version, channels, length = FEATURE_HEADER.unpack_from(payload)
    if version != FEATURE_VERSION:
        raise UnsupportedVersionError(f"{source}: feature version {version} is not supported (expected {FEATURE_VERSION})")
    expected = 4 * channels * length
    actual = len(payload) - FEATURE_HEADER.size
    if actual != expected:
        raise TruncatedPayloadError(source, expected, actual)
    return np.frombuffer(payload, dtype="<f4", offset=FEATURE_HEADER.size).reshape(channels, length).astype(np.float32)


def save_features(path: str | Path, features: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_features(features))


def load_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), source=path)


def save_frames(path: str | Path, frames: np.ndarray) -> Path:
    buffer = io.BytesIO()
    np.save(buffer, np.asarray(frames, dtype=np.uint8), allow_pickle=False)
    return atomic_write_bytes(path, buffer.getvalue())


def load_frames(path: str | Path) -> np.ndarray:
    frames = np.load(path, allow_pickle=False)
    if frames.ndim != 4 or frames.shape[0] != 3:
        raise FormatError(f"{path}: frames must be (3, T, H, W), got {frames.shape}")
    return frames


# == Synthetic generator =======================================================

MAX_PACKING_ATTEMPTS = 100
RAMP_FRAMES = 2.0
PIXEL_BACKGROUND = 40.0
PIXEL_NOISE_SD = 12.0


@dataclass(frozen=True)
class SynthVideo:
    """Layout of one synthetic video and the seed its tensor is rendered from."""

    annotation: VideoAnnotation
    split: str
    render_seed: np.random.SeedSequence = field(compare=False)


@dataclass(frozen=True)
class SynthDataset:
    spec: SynthSpec
    videos: Tuple[SynthVideo, ...]

    def split(self, name: str) -> Tuple[SynthVideo, ...]:
        return tuple(v for v in self.videos if v.split == name)

    def annotations(self, split: str) -> AnnotationFile:
        return AnnotationFile(tuple(v.annotation for v in self.split(split)), self.spec.num_classes)

    def render(self, video: SynthVideo) -> np.ndarray:
        """Feature sequence `(C, ceil(T / 8))` float32, or frames `(3, T, H, W)` uint8."""
        if self.spec.mode == "feature":
            return render_features(video, self.spec)
        return render_frames(video, self.spec)


def pack_instances(rng: np.random.Generator, video_len: int, lengths: Sequence[int], min_gap: int) -> List[int]:
    """Random non-overlapping starts, in the given order, at least `min_gap` frames apart."""
    count = len(lengths)
    slack = video_len - sum(lengths) - min_gap * max(count - 1, 0)
    if slack < 0:
        raise InfeasiblePackingError(
            f"{count} instances of {sum(lengths)} frames with gap {min_gap} do not fit in {video_len} frames")
    # stars and bars over the count + 1 free stretches
    cuts = np.sort(rng.integers(0, slack + 1, size=count))
    spare = np.diff(np.concatenate([[0], cuts]))
    starts, cursor = [], 0
    for length, extra in zip(lengths, spare):
        cursor += int(extra)
        starts.append(cursor)
        cursor += int(length) + min_gap
    return starts


def _layout_video(rng: np.random.Generator, spec: SynthSpec, video_id: str) -> VideoAnnotation:
    buckets = spec.bucket_frames()
    weights = np.asarray(spec.bucket_weights, dtype=np.float64)
    weights = weights / weights.sum()
    video_len = int(rng.integers(spec.video_len_range[0], spec.video_len_range[1] + 1))
    for _ in range(MAX_PACKING_ATTEMPTS):
        count = int(rng.integers(spec.instances_per_video[0], spec.instances_per_video[1] + 1))
        chosen = rng.choice(len(buckets), size=count, p=weights)
        lengths = [int(rng.integers(buckets[b][0], buckets[b][1] + 1)) for b in chosen]
        if sum(lengths) + spec.min_gap * (count - 1) > video_len:
            continue
        classes = rng.integers(0, spec.num_classes, size=count)
        starts = pack_instances(rng, video_len, lengths, spec.min_gap)
        instances = tuple(
            LabeledSegment(Segment(float(s), float(s + n)), int(k)) for s, n, k in zip(starts, lengths, classes)
        )
        return VideoAnnotation(video_id, video_len, spec.fps, instances)
    raise InfeasiblePackingError(
        f"{video_id}: no feasible packing of {spec.instances_per_video} instances into {video_len} frames "
        f"after {MAX_PACKING_ATTEMPTS} attempts")


def synth_dataset(spec: SynthSpec) -> SynthDataset:
    """Lay out every video of both splits; tensors are rendered on demand, deterministically."""
    lo_bucket = min(b[0] for b, w in zip(spec.bucket_frames(), spec.bucket_weights) if w > 0)
    fewest = spec.instances_per_video[0]
    if fewest * lo_bucket + spec.min_gap * (fewest - 1) > spec.video_len_range[1]:
        raise InfeasiblePackingError(
            f"even {fewest} instances of {lo_bucket} frames cannot fit in {spec.video_len_range[1]} frames")

    total = spec.num_train + spec.num_test
    videos = []
    for index, child in enumerate(np.random.SeedSequence(spec.seed).spawn(total)):
        layout_seed, render_seed = child.spawn(2)
        split = "train" if index < spec.num_train else "test"
        number = index if split == "train" else index - spec.num_train
        annotation = _layout_video(np.random.default_rng(layout_seed), spec, f"{split}_{number:04d}")
        videos.append(SynthVideo(annotation, split, render_seed))
    logger.info("synthesized layout of %d train + %d test videos (%s mode)", spec.num_train, spec.num_test, spec.mode)
    return SynthDataset(spec, tuple(videos))


def _envelope(num_frames: int, segment: Segment) -> np.ndarray:
    centers = np.arange(num_frames, dtype=np.float64) + 0.5
    rise = np.clip((centers - segment.start) / RAMP_FRAMES, 0.0, 1.0)
    fall = np.clip((segment.end - centers) / RAMP_FRAMES, 0.0, 1.0)
    return rise * fall


def class_channels(class_id: int, num_channels: int) -> np.ndarray:
    """The channel carrying the mean shift of class k: k mod C."""
    return np.array([class_id % num_channels])


def render_features(video: SynthVideo, spec: SynthSpec) -> np.ndarray:
    """Unit-variance noise plus a `snr` mean shift on the class channels inside instances."""
    rng = np.random.default_rng(video.render_seed)
    ann = video.annotation
    steps = int(math.ceil(ann.num_frames / TEMPORAL_POOL))
    features = rng.standard_normal((spec.feature_channels, steps)).astype(np.float32)
    if spec.snr == 0:
        return features
    for inst in ann.instances:
        frames = np.zeros(steps * TEMPORAL_POOL)
        frames[:ann.num_frames] = _envelope(ann.num_frames, inst.segment)
        shift = spec.snr * frames.reshape(steps, TEMPORAL_POOL).mean(axis=1)
        channels = class_channels(inst.class_id, spec.feature_channels)
        features[channels] += shift.astype(np.float32)[None, :]
    return features


def blink_half_period(class_id: int) -> int:
    """Frames a class-k square stays on (and off): 8 (k + 1)."""
    return TEMPORAL_POOL * (class_id + 1)


def render_frames(video: SynthVideo, spec: SynthSpec) -> np.ndarray:
    """Noisy dark frames; each instance shows a moving square blinking with its class period."""
    rng = np.random.default_rng(video.render_seed)
    ann = video.annotation
    size, square = spec.frame_size, spec.square_size
    jitter = spec.spatial_jitter if video.split == "train" else spec.test_spatial_jitter
    gray = rng.normal(PIXEL_BACKGROUND, PIXEL_NOISE_SD, (ann.num_frames, size, size)).astype(np.float32)
    amplitude = min(255.0 - PIXEL_BACKGROUND, PIXEL_NOISE_SD * spec.snr)
    limit = size - square

    for inst in ann.instances:
        start, end = int(inst.segment.start), int(math.ceil(inst.segment.end))
        origin = (limit / 2.0) + rng.uniform(-jitter, jitter, size=2)
        velocity = rng.uniform(-1.0, 1.0, size=2) * (size / 4.0) / max(end - start, 1)
        half = blink_half_period(inst.class_id)
        for t in range(start, min(end, ann.num_frames)):
            if ((t - start) // half) % 2:
                continue
            top, left = np.clip(np.rint(origin + velocity * (t - start)), 0, limit).astype(int)
            gray[t, top:top + square, left:left + square] += amplitude

    frames = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return np.broadcast_to(frames[None], (3,) + frames.shape).copy()


# == Dataset directory =========================================================


def annotations_path(root: str | Path, split: str) -> Path:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return Path(root) / f"annotations_{split}.json"


def write_dataset(dataset: SynthDataset, out_dir: str | Path, progress: Optional[bool] = None) -> Path:
    root = Path(out_dir)
    for split in SPLITS:
        save_annotations(annotations_path(root, split), dataset.annotations(split))
    if progress is None:
        progress = sys.stderr.isatty()
    feature_mode = dataset.spec.mode == "feature"
    for video in tqdm(dataset.videos, desc="rendering", unit="video", disable=not progress):
        tensor = dataset.render(video)
        if feature_mode:
            save_features(root / "features" / f"{video.annotation.video_id}.tadf", tensor)
        else:
            save_frames(root / "frames" / f"{video.annotation.video_id}.npy", tensor)
    logger.info("dataset written to %s", root)
    return root


def iter_clips(root: str | Path, annotations: AnnotationFile) -> Iterator[AnnotatedClip]:
    """Clips of an annotation file with features and/or frames attached from `root`."""
    base = Path(root)
    for video in annotations.videos:
        feature_path = base / "features" / f"{video.video_id}.tadf"
        frame_path = base / "frames" / f"{video.video_id}.npy"
        features = load_features(feature_path) if feature_path.exists() else None
        pixels = load_frames(frame_path) if frame_path.exists() else None
        if features is None and pixels is None:
            raise FormatError(f"{base}: no features or frames for video {video.video_id!r}")
        yield AnnotatedClip(
            video_id=video.video_id,
            num_frames=video.num_frames,
            fps=video.fps,
            gts=video.instances,
            pixels=pixels,
            features=features,
            feature_stride=TEMPORAL_POOL,
            num_classes=annotations.num_classes,
        )


def load_dataset(root: str | Path, split: str) -> List[AnnotatedClip]:
    clips = list(iter_clips(root, load_annotations(annotations_path(root, split))))
    logger.info("loaded %d %s clips from %s", len(clips), split, root)
    return clips


def annotated_fps(clips: Sequence[AnnotatedClip]) -> Mapping[VideoId, float]:
    return {c.video_id: c.fps for c in clips}
