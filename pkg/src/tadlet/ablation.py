"""Train and evaluate with and without the image-level augmentations."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .augment import AnnotatedClip
from .bootstrap import Bootstrap
from .config import AnchorConfig, AugmentPolicy, InferConfig, LossConfig, NetConfig, TrainConfig
from .evaluator import evaluate
from .helpers import atomic_write_text
from .inference import detect_dataset
from .network import Detector
from .trainer import fit


logger = logging.getLogger(__name__)

SETTINGS = ("image_level", "temporal_only")


@dataclass(frozen=True)
class AblationRow:
    seed: int
    setting: str
    average_map: float
    map_at_05: float


def ablate_augment(
    boot: Bootstrap,
    train: Sequence[AnnotatedClip],
    test: Sequence[AnnotatedClip],
    out_dir: str | Path,
    seeds: Sequence[int] = (1, 2),
    progress: Optional[bool] = None,
) -> List[AblationRow]:
    """One run per seed and setting; evaluates held-out mAP after each."""
    anchor_cfg = boot.section(AnchorConfig)
    net_cfg = boot.section(NetConfig)
    train_cfg = boot.section(TrainConfig)
    loss_cfg = boot.section(LossConfig)
    infer_cfg = boot.section(InferConfig)
    policy = boot.section(AugmentPolicy)
    ground_truth = {c.video_id: list(c.gts) for c in test}

    rows: List[AblationRow] = []
    for seed in seeds:
        for setting in SETTINGS:
            run_policy = dataclasses.replace(policy, seed=seed)
            if setting == "temporal_only":
                run_policy = run_policy.without_image_level()
            model = Detector(dataclasses.replace(net_cfg, seed=seed))
            logger.info("ablation run: seed %d, %s", seed, setting)
            fit(train, model, dataclasses.replace(train_cfg, seed=seed), run_policy,
                anchor_cfg=anchor_cfg, loss_cfg=loss_cfg, out_dir=Path(out_dir) / f"seed{seed}_{setting}",
                progress=progress)
            detections = detect_dataset(test, model, infer_cfg, anchor_cfg, run_policy, progress=progress)
            report = evaluate(detections, ground_truth, net_cfg.num_classes)
            rows.append(AblationRow(seed, setting, report.average_map, report.mean_ap(0.5)))
    return rows


def ablation_means(rows: Sequence[AblationRow]) -> Dict[str, float]:
    return {s: float(np.mean([r.average_map for r in rows if r.setting == s] or [0.0])) for s in SETTINGS}


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["seed", "setting", "average_map", "map@0.5"])
    for row in rows:
        writer.writerow([row.seed, row.setting, f"{row.average_map:.6f}", f"{row.map_at_05:.6f}"])
    for setting, mean in ablation_means(rows).items():
        writer.writerow(["mean", setting, f"{mean:.6f}", ""])
    return buffer.getvalue()


def write_ablation(path: str | Path, rows: Sequence[AblationRow]) -> Path:
    return atomic_write_text(path, ablation_csv(rows))
