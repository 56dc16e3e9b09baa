"""Unit tests for anchor generation, assignment, offset coding and the assignment histogram."""

import math

from pathlib import Path

import numpy as np
import pytest

from hypothesis import given, settings
from hypothesis import strategies as st

from tadlet.anchors import (
    IGNORED,
    NEGATIVE,
    assign,
    assign_arrays,
    assignment_histogram,
    decode,
    decode_arrays,
    decode_backward,
    encode,
    generate_anchors,
    scale_bucket,
)
from tadlet.augment import AnnotatedClip
from tadlet.config import AnchorConfig
from tadlet.errors import ConfigurationError, NonFiniteError
from tadlet.segments import LabeledSegment, Segment


@pytest.fixture
def default_anchors():
    return generate_anchors(AnchorConfig(), 768)


def _clip(gts, num_frames=768, fps=30.0, video_id="v"):
    labeled = tuple(LabeledSegment(Segment(s, e), 0) for s, e in gts)
    return AnnotatedClip(video_id, num_frames, fps, labeled)


class TestGenerateAnchors:
    """Pyramid anchor layout."""

    def test_default_count(self, default_anchors) -> None:
        """96 + 48 + 24 + 12 + 6 positions with 5 scales each."""
        assert len(default_anchors) == 930
        assert default_anchors.positions == (96, 48, 24, 12, 6)
        assert default_anchors.level_offsets == (0, 480, 720, 840, 900, 930)
        assert default_anchors.num_levels == 5

    def test_first_anchor(self, default_anchors) -> None:
        assert default_anchors.segment(0) == Segment(-4.0, 12.0)
        assert default_anchors.level(0)[0, 0].tolist() == [-4.0, 12.0]

    def test_default_scales(self) -> None:
        assert [round(s, 4) for s in AnchorConfig().scales_per_level] == [1.0, 1.1487, 1.3195, 1.5157, 1.7411]

    def test_order_is_level_position_scale(self, default_anchors) -> None:
        level1 = default_anchors.level(1)
        assert level1.shape == (48, 5, 2)
        centers = level1.mean(axis=2)
        assert np.allclose(centers[:, 0], (np.arange(48) + 0.5) * 16)
        assert np.allclose(np.diff(level1[3], axis=1)[:, 0], 32.0 * np.array(AnchorConfig().scales_per_level))
        assert default_anchors.level_of(480) == 1
        assert default_anchors.level_of(479) == 0

    def test_clip_len_must_divide(self) -> None:
        with pytest.raises(ConfigurationError, match="multiple of the largest stride"):
            generate_anchors(AnchorConfig(), 700)

    def test_with_num_scales(self) -> None:
        cfg = AnchorConfig().with_num_scales(3)
        assert cfg.num_scales == 3
        assert len(generate_anchors(cfg, 768)) == 186 * 3


class TestAssign:
    """tIoU-band assignment."""

    def test_bands(self) -> None:
        anchors = np.array([[0.0, 16.0], [0.0, 8.0], [100.0, 116.0]])
        result = assign_arrays(anchors, np.array([[0.0, 16.0]]), 0.6, 0.4)
        assert result.labels.tolist() == [0, IGNORED, NEGATIVE]
        assert result.positive_counts.tolist() == [1]
        assert result.max_tiou[1] == pytest.approx(0.5)

    def test_positive_goes_to_best_gt(self) -> None:
        anchors = np.array([[10.0, 30.0]])
        result = assign_arrays(anchors, np.array([[0.0, 20.0], [12.0, 30.0]]), 0.6, 0.4)
        assert result.labels.tolist() == [1]

    def test_no_gts_all_negative(self, default_anchors) -> None:
        result = assign(default_anchors, [], AnchorConfig())
        assert result.negative.all()
        assert result.positive_counts.size == 0

    def test_anchor_equal_to_gt(self, default_anchors) -> None:
        gt = default_anchors.segment(123)
        result = assign(default_anchors, [LabeledSegment(gt, 2)], AnchorConfig())
        assert result.labels[123] == 0
        assert result.positive_counts[0] >= 1

    @given(st.lists(st.tuples(st.floats(0.0, 700.0), st.floats(4.0, 400.0)), min_size=0, max_size=5))
    @settings(max_examples=60, deadline=None)
    def test_partition_and_monotonicity(self, raw) -> None:
        anchors = generate_anchors(AnchorConfig(), 768).segments
        gts = np.array([[s, s + n] for s, n in raw]).reshape(-1, 2)
        result = assign_arrays(anchors, gts, 0.6, 0.4)
        assert result.positive.sum() + result.negative.sum() + result.ignored.sum() == len(anchors)
        assert result.positive_counts.sum() == result.num_positive

        stricter = assign_arrays(anchors, gts, 0.7, 0.4)
        assert stricter.num_positive <= result.num_positive
        looser_negatives = assign_arrays(anchors, gts, 0.6, 0.3)
        assert looser_negatives.negative.sum() <= result.negative.sum()

    def test_translation_by_largest_stride(self) -> None:
        """Shifting an interior gt by 128 frames shifts level l positives by 128 / stride_l positions."""
        anchors = generate_anchors(AnchorConfig(), 768)
        cfg = AnchorConfig()
        before = assign(anchors, [LabeledSegment(Segment(300.0, 400.0), 0)], cfg)
        after = assign(anchors, [LabeledSegment(Segment(428.0, 528.0), 0)], cfg)
        assert before.num_positive > 0
        for level, stride in enumerate(anchors.strides):
            lo, hi = anchors.level_offsets[level], anchors.level_offsets[level + 1]
            shift = (128 // stride) * anchors.num_scales
            pos_before = np.flatnonzero(before.positive[lo:hi])
            pos_after = np.flatnonzero(after.positive[lo:hi])
            assert pos_after.tolist() == (pos_before + shift).tolist()


class TestOffsetCoding:
    """decode / encode."""

    def test_examples(self) -> None:
        anchor = Segment(0.0, 16.0)
        assert decode(anchor, (0.0, 0.0)) == anchor
        assert decode(anchor, (0.5, math.log(2.0))).as_tuple() == pytest.approx((0.0, 32.0))
        assert decode(anchor, (0.0, math.log(0.5))).as_tuple() == pytest.approx((4.0, 12.0))

    def test_zero_offsets_identity(self, default_anchors) -> None:
        decoded = decode_arrays(default_anchors.segments, np.zeros((len(default_anchors), 2)))
        assert np.allclose(decoded, default_anchors.segments, rtol=0, atol=1e-12)

    def test_non_finite_rejected(self) -> None:
        with pytest.raises(NonFiniteError, match="finite"):
            decode(Segment(0.0, 16.0), (math.nan, 0.0))

    def test_large_log_scale_not_capped(self) -> None:
        decoded = decode(Segment(0.0, 16.0), (0.0, 5.0))
        assert decoded.length == pytest.approx(16.0 * math.exp(5.0))
        assert decoded.as_tuple() == pytest.approx((8.0 - 8.0 * math.exp(5.0), 8.0 + 8.0 * math.exp(5.0)))

    def test_overflowing_length_rejected(self) -> None:
        with pytest.raises(NonFiniteError, match="overflows"):
            decode(Segment(0.0, 16.0), (0.0, 800.0))

    def test_backward_at_large_log_scales(self) -> None:
        anchors = np.array([[0.0, 16.0], [32.0, 96.0]])
        offsets = np.array([[0.1, 4.5], [-0.2, 5.0]])
        upstream = np.array([[0.3, -0.7], [1.1, 0.4]])
        grad = decode_backward(anchors, offsets, upstream)
        eps = 1e-6
        numeric = np.zeros_like(offsets)
        for i in range(2):
            for j in range(2):
                bumped = offsets.copy()
                bumped[i, j] += eps
                lowered = offsets.copy()
                lowered[i, j] -= eps
                diff = decode_arrays(anchors, bumped) - decode_arrays(anchors, lowered)
                numeric[i, j] = float((diff * upstream).sum()) / (2 * eps)
        assert np.allclose(grad, numeric, rtol=1e-6)

    def test_encode_inverts_decode(self) -> None:
        anchor, target = Segment(8.0, 40.0), Segment(13.0, 77.0)
        decoded = decode(anchor, encode(anchor, target))
        assert decoded.as_tuple() == pytest.approx(target.as_tuple())


class TestAssignmentHistogram:
    """Positives per gt by scale bucket."""

    def test_bucket_edges(self) -> None:
        assert scale_bucket(2.5) == "small"
        assert scale_bucket(2.6) == "medium"
        assert scale_bucket(6.0) == "medium"
        assert scale_bucket(6.1) == "large"

    def test_gt_on_an_anchor_counts(self) -> None:
        histogram = assignment_histogram([_clip([(20.0, 36.0)])], AnchorConfig())
        assert histogram.counts["small"][0] >= 1

    def test_empty(self) -> None:
        histogram = assignment_histogram([], AnchorConfig())
        assert histogram.is_empty
        assert histogram.mean() == 0.0
        assert histogram.to_csv() == "scale_bucket,positives_per_gt,pdf,cdf\n"

    def test_more_scales_more_positives(self) -> None:
        rng = np.random.default_rng(5)
        clips = []
        for i in range(40):
            length = float(rng.uniform(20.0, 300.0))
            start = float(rng.uniform(0.0, 768.0 - length))
            clips.append(_clip([(start, start + length)], video_id=f"v{i}"))
        five = assignment_histogram(clips, AnchorConfig().with_num_scales(5))
        three = assignment_histogram(clips, AnchorConfig().with_num_scales(3))
        assert five.mean() >= three.mean()

    def test_csv_and_plot(self, tmp_path: Path) -> None:
        clips = [_clip([(100.0, 130.0), (300.0, 500.0), (600.0, 720.0)]), _clip([(10.0, 250.0)], video_id="w")]
        histogram = assignment_histogram(clips, AnchorConfig())
        rows = histogram.to_csv().strip().splitlines()
        assert rows[0] == "scale_bucket,positives_per_gt,pdf,cdf"
        for bucket in ("small", "medium", "large"):
            cdf = [float(r.split(",")[3]) for r in rows[1:] if r.startswith(bucket)]
            assert cdf and cdf[-1] == pytest.approx(1.0)
        assert histogram.write_csv(tmp_path / "hist.csv").read_text() == histogram.to_csv()
        assert histogram.plot(tmp_path / "hist.png", title="5 anchors").stat().st_size > 0
