"""Temporal- and image-level augmentation of annotated clips.

Spatial transforms draw one set of parameters per clip and apply it to every
frame; none of them touches the temporal annotations.
"""

from __future__ import annotations

import dataclasses
import logging

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from matplotlib import colors as mcolors
from scipy import ndimage

from .config import AugmentPolicy
from .errors import AugmentationError, ConfigurationError, UnknownClassError
from .segments import LabeledSegment, Segment
from .types import FloatArray


logger = logging.getLogger(__name__)

PIXEL_MAX = 255.0


@dataclass(frozen=True, eq=False)
class Clip:
    """Frames `(3, T, H, W)` with values in [0, 255]."""

    pixels: np.ndarray
    fps: float = 30.0

    def __post_init__(self) -> None:
        if self.pixels.ndim != 4 or self.pixels.shape[0] != 3 or min(self.pixels.shape) <= 0:
            raise AugmentationError(f"Clip pixels must be (3, T, H, W) with positive sizes, got {self.pixels.shape}")

    @property
    def num_frames(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def spatial_size(self) -> Tuple[int, int]:
        return int(self.pixels.shape[2]), int(self.pixels.shape[3])

    def with_pixels(self, pixels: np.ndarray) -> Clip:
        return Clip(pixels, self.fps)


@dataclass(frozen=True, eq=False)
class AnnotatedClip:
    """A video (or a window of one) with its class-labeled ground truths.

    Carries frames, a precomputed feature sequence `(C, T / feature_stride)`,
    or both. `origin` is the frame of the source video this clip starts at.
    With `num_classes` set, every gt class must lie in `[0, num_classes)`.
    """

    video_id: str
    num_frames: int
    fps: float
    gts: Tuple[LabeledSegment, ...] = ()
    pixels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    feature_stride: int = 8
    origin: int = 0
    num_classes: Optional[int] = None

    def __post_init__(self) -> None:
        for gt in self.gts:
            if gt.segment.start < 0 or gt.segment.end > self.num_frames:
                raise AugmentationError(f"{self.video_id}: gt {gt.segment} outside [0, {self.num_frames}]")
            if self.num_classes is not None and not 0 <= gt.class_id < self.num_classes:
                raise UnknownClassError(f"{self.video_id}: gt class {gt.class_id} outside [0, {self.num_classes})")

    @property
    def clip(self) -> Clip:
        if self.pixels is None:
            raise AugmentationError(f"{self.video_id} has no frames")
        return Clip(self.pixels, self.fps)

    def gt_array(self) -> FloatArray:
        if not self.gts:
            return np.zeros((0, 2))
        return np.array([g.segment.as_tuple() for g in self.gts], dtype=np.float64)

    def gt_classes(self) -> np.ndarray:
        return np.array([g.class_id for g in self.gts], dtype=np.int64)


# -- temporal level ------------------------------------------------------------


def retained_fractions(gts: FloatArray, starts: np.ndarray, window: int) -> FloatArray:
    """Fraction of each gt's length inside `[start, start + window)`, shape (S, G)."""
    starts = np.asarray(starts, dtype=np.float64)[:, None]
    inter = np.clip(np.minimum(gts[None, :, 1], starts + window) - np.maximum(gts[None, :, 0], starts), 0.0, None)
    return inter / (gts[None, :, 1] - gts[None, :, 0])


def _pad_frames(video: AnnotatedClip, window: int) -> AnnotatedClip:
    pad = window - video.num_frames
    pixels = features = None
    if video.pixels is not None:
        pixels = np.pad(video.pixels, ((0, 0), (0, pad), (0, 0), (0, 0)))
    if video.features is not None:
        target = window // video.feature_stride
        features = np.pad(video.features, ((0, 0), (0, max(0, target - video.features.shape[1]))))[:, :target]
    return dataclasses.replace(video, num_frames=window, pixels=pixels, features=features)


def crop_window(video: AnnotatedClip, start: int, window: int, min_retained: float = 0.75) -> AnnotatedClip:
    """Cut `[start, start + window)` and keep gts retaining at least `min_retained` of their length."""
    if video.num_frames < window:
        return _pad_frames(video, window)
    if not 0 <= start <= video.num_frames - window:
        raise AugmentationError(f"window start {start} outside [0, {video.num_frames - window}]")

    kept = []
    for gt in video.gts:
        lo = max(gt.segment.start, start)
        hi = min(gt.segment.end, start + window)
        if hi <= lo or (hi - lo) / gt.segment.length < min_retained:
            continue
        kept.append(LabeledSegment(Segment(lo - start, hi - start), gt.class_id))

    pixels = features = None
    if video.pixels is not None:
        pixels = video.pixels[:, start:start + window]
    if video.features is not None:
        if start % video.feature_stride or window % video.feature_stride:
            raise AugmentationError(f"feature crops need start and window divisible by {video.feature_stride}")
        lo_f = start // video.feature_stride
        features = video.features[:, lo_f:lo_f + window // video.feature_stride]
    return dataclasses.replace(
        video, num_frames=window, gts=tuple(kept), pixels=pixels, features=features,
        origin=video.origin + start,
    )


def temporal_random_crop(
    video: AnnotatedClip,
    window: int,
    rng: np.random.Generator,
    min_retained: float = 0.75,
) -> AnnotatedClip:
    """Sample a window in which at least one gt keeps `min_retained` of its length.

    Starts are drawn uniformly from the valid set; when a feature sequence is
    attached they are restricted to multiples of its stride. If no start is
    valid, the start maximizing the best retained fraction is used.
    """
    if video.num_frames <= window:
        if video.num_frames < window:
            logger.debug("%s: padding %d frames to window %d", video.video_id, video.num_frames, window)
        return crop_window(video, 0, window, min_retained)

    step = video.feature_stride if video.features is not None else 1
    starts = np.arange(0, video.num_frames - window + 1, step)
    if not video.gts:
        return crop_window(video, int(rng.choice(starts)), window, min_retained)

    best = retained_fractions(video.gt_array(), starts, window).max(axis=1)
    valid = starts[best >= min_retained]
    if valid.size:
        start = int(rng.choice(valid))
    else:
        start = int(starts[np.argmax(best)])
        logger.warning("%s: no window keeps %.0f%% of any gt, using start %d (best %.3f)",
                       video.video_id, 100 * min_retained, start, best.max())
    return crop_window(video, start, window, min_retained)


# -- image level ---------------------------------------------------------------


def crop_offset(source: Tuple[int, int], size: Tuple[int, int], mode: str, rng: Optional[np.random.Generator] = None) -> Tuple[int, int]:
    (height, width), (crop_h, crop_w) = source, size
    if crop_h > height or crop_w > width:
        raise AugmentationError(f"crop {crop_h}x{crop_w} larger than clip {height}x{width}")
    if mode == "center":
        return (height - crop_h) // 2, (width - crop_w) // 2
    if mode == "random":
        if rng is None:
            raise ConfigurationError("random crop needs an rng")
        return int(rng.integers(0, height - crop_h + 1)), int(rng.integers(0, width - crop_w + 1))
    raise ConfigurationError(f"crop mode must be 'random' or 'center', got {mode!r}")


def spatial_crop(clip: Clip, size: Sequence[int], mode: str = "random", rng: Optional[np.random.Generator] = None) -> Clip:
    """One crop offset per clip, shared by all frames."""
    crop_h, crop_w = int(size[0]), int(size[1])
    top, left = crop_offset(clip.spatial_size, (crop_h, crop_w), mode, rng)
    return clip.with_pixels(clip.pixels[:, :, top:top + crop_h, left:left + crop_w])


def flip_pixels(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., ::-1].copy()


def horizontal_flip(clip: Clip, rng: np.random.Generator, p: float = 0.5) -> Clip:
    if rng.random() < p:
        return clip.with_pixels(flip_pixels(clip.pixels))
    return clip


def rotate_pixels(pixels: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every frame about the image center; nearest neighbour, zero fill."""
    if angle == 0.0:
        return pixels.copy()
    return ndimage.rotate(pixels, angle, axes=(3, 2), reshape=False, order=0, mode="constant", cval=0.0)


def rotate_clip(clip: Clip, rng: np.random.Generator, angle_range: Sequence[float] = (-45.0, 45.0)) -> Clip:
    angle = float(rng.uniform(angle_range[0], angle_range[1]))
    return clip.with_pixels(rotate_pixels(clip.pixels, angle))


@dataclass(frozen=True)
class DistortionParams:
    """One clip's photometric distortion; the defaults are the identity."""

    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    channel_order: Tuple[int, ...] = field(default=(0, 1, 2))


def sample_distortion(rng: np.random.Generator, policy: AugmentPolicy) -> DistortionParams:
    """Draw each sub-transform with probability `distort_prob` (SSD recipe)."""
    p = policy.distort_prob
    brightness = float(rng.uniform(-policy.brightness_delta, policy.brightness_delta)) if rng.random() < p else 0.0
    contrast = float(rng.uniform(*policy.contrast_range)) if rng.random() < p else 1.0
    saturation = float(rng.uniform(*policy.saturation_range)) if rng.random() < p else 1.0
    hue = float(rng.uniform(-policy.hue_delta, policy.hue_delta)) if rng.random() < p else 0.0
    order = tuple(int(c) for c in rng.permutation(3)) if rng.random() < policy.channel_swap_prob else (0, 1, 2)
    return DistortionParams(brightness, contrast, saturation, hue, order)


def apply_distortion(clip: Clip, params: DistortionParams) -> Clip:
    """Brightness shift, contrast scale, saturation scale, hue shift, channel permutation."""
    pixels = np.asarray(clip.pixels, dtype=np.float32)
    if params.brightness:
        pixels = np.clip(pixels + params.brightness, 0.0, PIXEL_MAX)
    if params.contrast != 1.0:
        pixels = np.clip(pixels * params.contrast, 0.0, PIXEL_MAX)
    if params.saturation != 1.0 or params.hue:
        hsv = mcolors.rgb_to_hsv(np.moveaxis(pixels, 0, -1) / PIXEL_MAX)
        hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation, 0.0, 1.0)
        hsv[..., 0] = np.mod(hsv[..., 0] + params.hue / 360.0, 1.0)
        pixels = np.clip(np.moveaxis(mcolors.hsv_to_rgb(hsv), -1, 0) * PIXEL_MAX, 0.0, PIXEL_MAX).astype(np.float32)
    if tuple(params.channel_order) != (0, 1, 2):
        pixels = pixels[list(params.channel_order)]
    return clip.with_pixels(pixels)


def photometric_distort(clip: Clip, rng: np.random.Generator, policy: Optional[AugmentPolicy] = None) -> Clip:
    return apply_distortion(clip, sample_distortion(rng, policy or AugmentPolicy()))


# -- pipeline ------------------------------------------------------------------


class AugmentPipeline:
    """Temporal crop followed by the image-level transforms a policy enables.

    With `train=False` only the center crop is applied.
    """

    def __init__(self, policy: AugmentPolicy, train: bool = True) -> None:
        self.policy = policy
        self.train = train

    def spatial(self, clip: Clip, rng: np.random.Generator) -> Clip:
        policy = self.policy
        clip = clip.with_pixels(np.asarray(clip.pixels, dtype=np.float32))
        if clip.spatial_size != tuple(policy.crop_size):
            mode = "random" if self.train and policy.random_crop else "center"
            clip = spatial_crop(clip, policy.crop_size, mode, rng)
        if not self.train:
            return clip
        if policy.flip:
            clip = horizontal_flip(clip, rng, policy.flip_prob)
        if policy.rotate:
            clip = rotate_clip(clip, rng, policy.rotation_range)
        if policy.distort:
            clip = photometric_distort(clip, rng, policy)
        return clip

    def __call__(self, video: AnnotatedClip, window: int, rng: np.random.Generator) -> AnnotatedClip:
        if self.train and self.policy.temporal_crop:
            clip = temporal_random_crop(video, window, rng, self.policy.min_retained)
        else:
            clip = crop_window(video, 0, min(window, video.num_frames), self.policy.min_retained)
            if clip.num_frames < window:
                clip = _pad_frames(clip, window)
        if clip.pixels is not None:
            clip = dataclasses.replace(clip, pixels=self.spatial(clip.clip, rng).pixels)
        return clip
