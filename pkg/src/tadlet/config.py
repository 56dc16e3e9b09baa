"""Configuration sections of a run.

Each section is a frozen dataclass registered under the `section` kind; the
registrar builds it from the options subtree of the same identity, i.e. from
the top-level YAML key (`anchor`, `net`, `loss`, `train`, `infer`, `augment`,
`synth`).
"""

from __future__ import annotations

import dataclasses
import math

from abc import ABC
from dataclasses import dataclass, field
from typing import Any, ClassVar, Mapping, Optional, Self, Tuple

from .errors import ConfigurationError
from .helpers import snake_case
from .registrant import RegistrantAbstract
from .registry import Registry
from .types import RegistrantIdentity, RegistrantKind


SRM_MODES = ("avg", "max", "conv")
SUPPRESS_MODES = ("nms", "nmw")
SYNTH_MODES = ("feature", "pixel")


class SectionAbstract(RegistrantAbstract, ABC):
    """Base class for configuration sections."""

    _suffixes: ClassVar[Tuple[str, ...]] = ("_config", "_policy", "_spec")

    @classmethod
    def kind(cls) -> RegistrantKind:
        return "section"

    @classmethod
    def identity(cls) -> RegistrantIdentity:
        name = snake_case(cls.__name__)
        for suffix in cls._suffixes:
            if name.endswith(suffix):
                return name[:-len(suffix)]
        return name

    @classmethod
    def build(cls, registry: Registry[Any]) -> Self:
        return cls.from_options(cls.options_from(registry))

    @classmethod
    def from_options(cls, options: Optional[Mapping[str, Any]] = None) -> Self:
        """Build the section from a mapping, rejecting unknown keys."""
        options = dict(options or {})
        known = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
        unknown = sorted(set(options) - set(known))
        if unknown:
            raise ConfigurationError(f"[{cls.identity()}] unknown option(s): {', '.join(unknown)}")
        kwargs = {}
        for name, value in options.items():
            kwargs[name] = _coerce(value, _default_of(known[name]))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(f"[{cls.identity()}] {exc}") from exc

    def to_options(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}  # type: ignore[call-overload]

    def _require(self, condition: bool, message: str) -> None:
        if not condition:
            raise ConfigurationError(f"[{self.identity()}] {message}")


def _default_of(f: dataclasses.Field[Any]) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(_coerce(v, default[0] if default else None) for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _geometric_scales(num_scales: int) -> Tuple[float, ...]:
    return tuple(2.0 ** (i / num_scales) for i in range(num_scales))


@dataclass(frozen=True)
class AnchorConfig(SectionAbstract):
    """Anchor layout and tIoU assignment bands."""

    strides: Tuple[int, ...] = (8, 16, 32, 64, 128)
    base_sizes: Tuple[float, ...] = (16.0, 32.0, 64.0, 128.0, 256.0)
    scales_per_level: Tuple[float, ...] = field(default_factory=lambda: _geometric_scales(5))
    pos_thr: float = 0.6
    neg_thr: float = 0.4

    def __post_init__(self) -> None:
        self._require(len(self.strides) > 0, "strides must not be empty")
        self._require(all(int(s) == s and s > 0 for s in self.strides), f"strides must be positive integers, got {self.strides}")
        self._require(all(a < b for a, b in zip(self.strides, self.strides[1:])), f"strides must be strictly increasing, got {self.strides}")
        self._require(len(self.strides) == len(self.base_sizes), "strides and base_sizes must have equal length")
        self._require(all(b > 0 for b in self.base_sizes), "base_sizes must be positive")
        self._require(len(self.scales_per_level) > 0 and all(s > 0 for s in self.scales_per_level), "scales_per_level must be positive")
        self._require(0.0 <= self.neg_thr < self.pos_thr <= 1.0, f"need 0 <= neg_thr < pos_thr <= 1, got {self.neg_thr}/{self.pos_thr}")

    @property
    def num_scales(self) -> int:
        return len(self.scales_per_level)

    @property
    def max_stride(self) -> int:
        return int(self.strides[-1])

    def with_num_scales(self, num_scales: int) -> AnchorConfig:
        """The same layout with the scale set {2^(i/n)} for i < n."""
        return dataclasses.replace(self, scales_per_level=_geometric_scales(num_scales))


@dataclass(frozen=True)
class NetConfig(SectionAbstract):
    """Widths and switches of the detector network."""

    backbone_channels: int = 64
    tdm_channels: int = 512
    fpn_channels: int = 256
    head_channels: int = 256
    head_convs: int = 4
    num_classes: int = 3
    anchors_per_position: int = 5
    num_levels: int = 5
    srm_mode: str = "avg"
    frozen: bool = False
    prior_prob: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("backbone_channels", "tdm_channels", "fpn_channels", "head_channels",
                     "head_convs", "num_classes", "anchors_per_position", "num_levels"):
            self._require(int(getattr(self, name)) > 0, f"{name} must be positive")
        self._require(self.srm_mode in SRM_MODES, f"srm_mode must be one of {SRM_MODES}, got {self.srm_mode!r}")
        self._require(0.0 < self.prior_prob < 1.0, "prior_prob must lie in (0, 1)")


@dataclass(frozen=True)
class LossConfig(SectionAbstract):
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0

    def __post_init__(self) -> None:
        self._require(0.0 < self.focal_alpha < 1.0, "focal_alpha must lie in (0, 1)")
        self._require(self.focal_gamma >= 0.0, "focal_gamma must be >= 0")
        self._require(self.reg_weight > 0.0, "reg_weight must be > 0")


@dataclass(frozen=True)
class TrainConfig(SectionAbstract):
    """Optimizer, schedule and loop settings."""

    lr_max: float = 0.01
    lr_min: float = 0.0001
    warmup_iters: int = 500
    warmup_start_lr: float = 0.001
    cycle_epochs: int = 100
    total_epochs: int = 1200
    momentum: float = 0.9
    weight_decay: float = 0.0001
    decay_exclude: Tuple[str, ...] = ()
    grad_clip_norm: Optional[float] = None
    batch_size: int = 16
    clip_len: int = 768
    checkpoint_interval: int = 50
    workers: int = 0
    deterministic: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self._require(0.0 < self.lr_min < self.lr_max, f"need 0 < lr_min < lr_max, got {self.lr_min}/{self.lr_max}")
        self._require(self.warmup_iters >= 0, "warmup_iters must be >= 0")
        self._require(self.warmup_start_lr > 0.0, "warmup_start_lr must be > 0")
        self._require(self.cycle_epochs > 0, "cycle_epochs must be > 0")
        self._require(self.total_epochs >= 0, "total_epochs must be >= 0")
        self._require(0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")
        self._require(self.weight_decay >= 0.0, "weight_decay must be >= 0")
        self._require(self.grad_clip_norm is None or self.grad_clip_norm > 0, "grad_clip_norm must be > 0 when set")
        self._require(self.batch_size > 0, "batch_size must be > 0")
        self._require(self.clip_len > 0, "clip_len must be > 0")
        self._require(self.checkpoint_interval > 0, "checkpoint_interval must be > 0")
        self._require(self.workers >= 0, "workers must be >= 0")


@dataclass(frozen=True)
class InferConfig(SectionAbstract):
    """Sliding-window inference and post-processing."""

    window: int = 768
    overlap_ratio: float = 0.25
    score_threshold: float = 0.005
    suppress_threshold: float = 0.5
    suppress_mode: str = "nmw"
    max_detections_per_video: int = 200

    def __post_init__(self) -> None:
        self._require(self.window > 0, "window must be > 0")
        self._require(0.0 <= self.overlap_ratio < 1.0, "overlap_ratio must lie in [0, 1)")
        self._require(0.0 < self.score_threshold < 1.0, "score_threshold must lie in (0, 1)")
        self._require(0.0 < self.suppress_threshold < 1.0, "suppress_threshold must lie in (0, 1)")
        self._require(self.suppress_mode in SUPPRESS_MODES, f"suppress_mode must be one of {SUPPRESS_MODES}")
        self._require(self.max_detections_per_video > 0, "max_detections_per_video must be > 0")

    @property
    def stride(self) -> int:
        return max(1, int(round(self.window * (1.0 - self.overlap_ratio))))


@dataclass(frozen=True)
class AugmentPolicy(SectionAbstract):
    """Temporal- and image-level augmentation switches and ranges."""

    temporal_crop: bool = True
    min_retained: float = 0.75
    random_crop: bool = True
    flip: bool = True
    rotate: bool = True
    distort: bool = True
    crop_size: Tuple[int, ...] = (112, 112)
    rotation_range: Tuple[float, ...] = (-45.0, 45.0)
    flip_prob: float = 0.5
    brightness_delta: float = 32.0
    contrast_range: Tuple[float, ...] = (0.5, 1.5)
    saturation_range: Tuple[float, ...] = (0.5, 1.5)
    hue_delta: float = 18.0
    channel_swap_prob: float = 0.5
    distort_prob: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        self._require(len(self.crop_size) == 2 and all(s > 0 for s in self.crop_size), f"crop_size must be two positive ints, got {self.crop_size}")
        lo, hi = self.rotation_range
        self._require(-180.0 <= lo <= hi <= 180.0, f"rotation_range must lie within [-180, 180], got {self.rotation_range}")
        self._require(0.0 < self.min_retained <= 1.0, "min_retained must lie in (0, 1]")
        for name in ("flip_prob", "channel_swap_prob", "distort_prob"):
            self._require(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        self._require(self.brightness_delta >= 0 and self.hue_delta >= 0, "deltas must be >= 0")
        for name in ("contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            self._require(0.0 <= lo <= hi, f"{name} must be an ordered non-negative pair")

    @property
    def image_level(self) -> bool:
        return self.random_crop or self.flip or self.rotate or self.distort

    def without_image_level(self) -> AugmentPolicy:
        """Temporal cropping only; spatial crop falls back to center mode."""
        return dataclasses.replace(self, random_crop=False, flip=False, rotate=False, distort=False)


@dataclass(frozen=True)
class SynthSpec(SectionAbstract):
    """Synthetic dataset generator settings."""

    num_train: int = 32
    num_test: int = 8
    video_len_range: Tuple[int, ...] = (768, 1536)
    num_classes: int = 3
    instances_per_video: Tuple[int, ...] = (1, 4)
    bucket_weights: Tuple[float, ...] = (1.0, 1.0, 1.0)
    min_instance_sec: float = 1.0
    small_max_sec: float = 2.5
    medium_max_sec: float = 6.0
    large_max_sec: float = 10.0
    min_gap: int = 16
    fps: float = 30.0
    snr: float = 4.0
    mode: str = "feature"
    feature_channels: int = 64
    frame_size: int = 128
    square_size: int = 32
    spatial_jitter: int = 8
    test_spatial_jitter: int = 8
    seed: int = 7

    def __post_init__(self) -> None:
        self._require(self.num_train >= 0 and self.num_test >= 0, "video counts must be >= 0")
        lo, hi = self.video_len_range
        self._require(0 < lo <= hi, f"video_len_range must be an ordered positive pair, got {self.video_len_range}")
        self._require(self.num_classes >= 1, "num_classes must be >= 1")
        lo, hi = self.instances_per_video
        self._require(1 <= lo <= hi, "instances_per_video must be an ordered pair >= 1")
        self._require(len(self.bucket_weights) == 3 and sum(self.bucket_weights) > 0
                      and min(self.bucket_weights) >= 0, "bucket_weights needs three non-negative weights")
        self._require(0 < self.min_instance_sec <= self.small_max_sec < self.medium_max_sec < self.large_max_sec,
                      "instance second bounds must be increasing")
        self._require(self.fps > 0 and self.snr >= 0 and self.min_gap >= 0, "fps > 0, snr >= 0, min_gap >= 0 required")
        self._require(self.mode in SYNTH_MODES, f"mode must be one of {SYNTH_MODES}")
        self._require(self.feature_channels >= 1, "feature_channels must be >= 1")
        self._require(0 < self.square_size < self.frame_size, "square_size must be smaller than frame_size")
        self._require(min(self.spatial_jitter, self.test_spatial_jitter) >= 0, "jitter must be >= 0")

    def bucket_frames(self) -> Tuple[Tuple[int, int], ...]:
        """Inclusive frame-length ranges for the small, medium and large buckets."""
        bounds = (self.min_instance_sec, self.small_max_sec, self.medium_max_sec, self.large_max_sec)
        frames = [self.fps * b for b in bounds]
        return tuple(
            (int(math.ceil(lo)) + (1 if i else 0), int(math.floor(hi)))
            for i, (lo, hi) in enumerate(zip(frames, frames[1:]))
        )


SECTIONS = (AnchorConfig, NetConfig, LossConfig, TrainConfig, InferConfig, AugmentPolicy, SynthSpec)


class SectionRegistry(Registry[SectionAbstract]):
    """A registry specifically for configuration sections."""

    @classmethod
    def kind(cls) -> str:
        return SectionAbstract.kind()
