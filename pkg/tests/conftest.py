"""Test configuration and fixtures for tadlet testing."""

from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pytest
import yaml

from tadlet.augment import AnnotatedClip
from tadlet.config import AnchorConfig, NetConfig, SynthSpec, TrainConfig
from tadlet.network import Detector
from tadlet.segments import LabeledSegment, Segment


ClipFactory = Callable[..., AnnotatedClip]


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch: pytest.MonkeyPatch) -> None:
    """Keep a TAD_SEED from the calling shell out of every test."""
    monkeypatch.delenv("TAD_SEED", raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_net_cfg() -> NetConfig:
    """Three pyramid levels, two classes, three anchors per position."""
    return NetConfig(
        backbone_channels=4, tdm_channels=6, fpn_channels=6, head_channels=6, head_convs=2,
        num_classes=2, anchors_per_position=3, num_levels=3, seed=0,
    )


@pytest.fixture
def tiny_anchor_cfg() -> AnchorConfig:
    return AnchorConfig(strides=(8, 16, 32), base_sizes=(16.0, 32.0, 64.0)).with_num_scales(3)


@pytest.fixture
def tiny_model(tiny_net_cfg: NetConfig) -> Detector:
    return Detector(tiny_net_cfg)


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(warmup_iters=2, cycle_epochs=2, total_epochs=2, batch_size=2, clip_len=128,
                       checkpoint_interval=1, seed=3)


@pytest.fixture
def tiny_synth_spec() -> SynthSpec:
    """Short feature-mode videos whose instances always fit."""
    return SynthSpec(
        num_train=3, num_test=2, video_len_range=(256, 384), num_classes=2, instances_per_video=(1, 2),
        large_max_sec=8.0, feature_channels=4, seed=11,
    )


@pytest.fixture
def make_clip() -> ClipFactory:
    """Build a feature-sequence clip of seeded unit-normal features, one step per 8 frames."""

    def factory(
        num_frames: int = 128,
        gts: Sequence[Tuple[float, float, int]] = ((16.0, 48.0, 0),),
        channels: int = 4,
        video_id: str = "clip",
        seed: Optional[int] = 0,
    ) -> AnnotatedClip:
        steps = -(-num_frames // 8)
        features = np.random.default_rng(seed).standard_normal((channels, steps)).astype(np.float32)
        labeled = tuple(LabeledSegment(Segment(s, e), k) for s, e, k in gts)
        return AnnotatedClip(video_id, num_frames, 30.0, labeled, features=features, feature_stride=8)

    return factory


@pytest.fixture
def tiny_config_path(
    tmp_path: Path,
    tiny_net_cfg: NetConfig,
    tiny_anchor_cfg: AnchorConfig,
    tiny_train_cfg: TrainConfig,
    tiny_synth_spec: SynthSpec,
) -> Path:
    """A run configuration file matching the tiny fixtures, inference window 128."""
    document = {
        "net": tiny_net_cfg.to_options(),
        "anchor": tiny_anchor_cfg.to_options(),
        "train": tiny_train_cfg.to_options(),
        "synth": tiny_synth_spec.to_options(),
        "infer": {"window": 128, "max_detections_per_video": 50},
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(document))
    return path
