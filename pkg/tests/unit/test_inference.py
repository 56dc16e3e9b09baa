"""Unit tests for sliding-window inference and the detections file."""

import json

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import pytest

from tadlet.anchors import encode_arrays, generate_anchors
from tadlet.augment import AnnotatedClip
from tadlet.config import AnchorConfig, AugmentPolicy, InferConfig
from tadlet.errors import FormatError
from tadlet.inference import (
    detect_dataset,
    detect_video,
    extract_features,
    plan_windows,
    read_detections,
    write_detections,
)
from tadlet.network import Detector
from tadlet.segments import Detection, Segment, tiou_matrix


class WindowOracle:
    """Stands in for a detector: fires the best anchor for every target inside the window.

    Feature channel 0 holds the feature-step index, so the window start is read
    off the input.
    """

    def __init__(self, targets: Sequence[Tuple[float, float, int]], num_classes: int, window: int) -> None:
        self.targets = targets
        self.num_classes = num_classes
        self.window = window
        self.anchors = generate_anchors(AnchorConfig(), window).segments
        self.calls = []

    def eval(self) -> "WindowOracle":
        return self

    def __call__(self, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        start = float(features[0, 0, 0]) * 8.0
        self.calls.append(start)
        cls = np.full((1, len(self.anchors), self.num_classes), -20.0)
        reg = np.zeros((1, len(self.anchors), 2))
        for lo, hi, k in self.targets:
            if lo < start or lo >= start + self.window:
                continue
            local = np.array([[lo - start, hi - start]])
            best = int(tiou_matrix(self.anchors, local)[:, 0].argmax())
            cls[0, best, k] = 10.0
            reg[0, best] = encode_arrays(self.anchors[best:best + 1], local)[0]
        return cls, reg

    def flatten(self, output: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        return output


def _step_video(num_frames: int, video_id: str = "v") -> AnnotatedClip:
    steps = -(-num_frames // 8)
    features = np.tile(np.arange(steps, dtype=np.float32), (2, 1))
    return AnnotatedClip(video_id, num_frames, 30.0, (), features=features)


class TestPlanWindows:
    """Window starts."""

    def test_examples(self) -> None:
        cfg = InferConfig()
        assert plan_windows(768, cfg) == [0]
        assert plan_windows(1536, cfg) == [0, 576, 768]
        assert plan_windows(500, cfg) == [0]
        assert plan_windows(1344, cfg) == [0, 576]

    @pytest.mark.parametrize("length", [769, 1000, 2047, 5000])
    def test_every_frame_covered(self, length: int) -> None:
        cfg = InferConfig()
        starts = plan_windows(length, cfg)
        covered = np.zeros(length, dtype=bool)
        for s in starts:
            covered[s:s + cfg.window] = True
        assert covered.all()
        assert starts[-1] + cfg.window == length
        assert starts == sorted(set(starts))

    def test_empty_video(self) -> None:
        with pytest.raises(ValueError, match="video_len"):
            plan_windows(0, InferConfig())


class TestDetectVideo:
    """Windows, lifting, suppression."""

    def test_duplicates_from_overlapping_windows_collapse(self) -> None:
        oracle = WindowOracle([(600.0, 700.0, 1)], num_classes=2, window=768)
        dets = detect_video(_step_video(1536), oracle, InferConfig(), AnchorConfig())
        assert oracle.calls == [0.0, 576.0, 768.0]
        assert len(dets) == 1
        assert dets[0].class_id == 1
        assert dets[0].segment.as_tuple() == pytest.approx((600.0, 700.0))

    def test_nms_mode(self) -> None:
        oracle = WindowOracle([(600.0, 700.0, 0), (100.0, 200.0, 0)], num_classes=1, window=768)
        dets = detect_video(_step_video(1536), oracle, InferConfig(suppress_mode="nms"), AnchorConfig())
        assert sorted(round(d.segment.start) for d in dets) == [100, 600]

    def test_segments_clipped_to_video(self) -> None:
        oracle = WindowOracle([(450.0, 560.0, 0)], num_classes=1, window=768)
        dets = detect_video(_step_video(500), oracle, InferConfig(), AnchorConfig())
        assert len(dets) == 1
        assert dets[0].segment.start == pytest.approx(450.0)
        assert dets[0].segment.end == 500.0

    def test_untrained_model(self, tiny_model: Detector, tiny_anchor_cfg: AnchorConfig, make_clip) -> None:
        cfg = InferConfig(window=128, max_detections_per_video=20)
        video = make_clip(num_frames=300)
        dets = detect_video(video, tiny_model, cfg, tiny_anchor_cfg)
        assert 0 < len(dets) <= 20
        assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
        assert all(0.0 <= d.segment.start < d.segment.end <= 300.0 for d in dets)
        assert all(cfg.score_threshold <= d.score <= 1.0 for d in dets)
        assert {d.class_id for d in dets} <= {0, 1}

    def test_dataset(self, tiny_model: Detector, tiny_anchor_cfg: AnchorConfig, make_clip) -> None:
        videos = [make_clip(video_id="a"), make_clip(num_frames=200, video_id="b", seed=1)]
        results = detect_dataset(videos, tiny_model, InferConfig(window=128), tiny_anchor_cfg, progress=False)
        assert list(results) == ["a", "b"]

    def test_frame_video(self, tiny_model: Detector, tiny_anchor_cfg: AnchorConfig) -> None:
        pixels = np.random.default_rng(0).integers(0, 256, (3, 200, 36, 36)).astype(np.uint8)
        video = AnnotatedClip("f", 200, 30.0, (), pixels=pixels)
        dets = detect_video(video, tiny_model, InferConfig(window=128), tiny_anchor_cfg, AugmentPolicy(crop_size=(32, 32)))
        assert all(d.segment.end <= 200.0 for d in dets)


class TestExtractFeatures:
    """Backbone + SRM over whole videos."""

    def test_shape_and_chunking(self, tiny_model: Detector) -> None:
        pixels = np.random.default_rng(0).integers(0, 256, (3, 100, 32, 32)).astype(np.uint8)
        video = AnnotatedClip("f", 100, 30.0, (), pixels=pixels)
        policy = AugmentPolicy(crop_size=(32, 32))
        whole = extract_features(video, tiny_model, policy, chunk=768)
        chunked = extract_features(video, tiny_model, policy, chunk=16)
        assert whole.shape == (4, 13)
        assert np.allclose(whole, chunked)

    def test_needs_frames(self, tiny_model: Detector, make_clip) -> None:
        with pytest.raises(FormatError, match="no frames"):
            extract_features(make_clip(), tiny_model, AugmentPolicy())


class TestDetectionsFile:
    """JSON detections keyed by video id."""

    def test_round_trip(self, tmp_path: Path) -> None:
        dets = {"v1": [Detection(Segment(30.0, 90.0), 0.75, 2)], "v2": []}
        path = write_detections(tmp_path / "dets.json", dets, {"v1": 30.0})
        assert read_detections(path) == dets
        row = json.loads(path.read_text())["v1"][0]
        assert row["start_sec"] == 1.0 and row["end_sec"] == 3.0

    def test_malformed(self, tmp_path: Path) -> None:
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(FormatError, match="line 1"):
            read_detections(path)
        path.write_text('{"v": [{"start_frame": 1}]}')
        with pytest.raises(FormatError, match="v\\[0\\]"):
            read_detections(path)
        path.write_text("[]")
        with pytest.raises(FormatError, match="top level"):
            read_detections(path)
