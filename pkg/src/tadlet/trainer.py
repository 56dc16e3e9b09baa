"""SGD with momentum and weight decay under a warmup + cosine-restart schedule,
and the epoch loop over augmented clips."""

from __future__ import annotations

import csv
import fnmatch
import json
import logging
import math
import sys

from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from tqdm import tqdm

from .anchors import AnchorSet, AssignmentResult, assign_arrays, generate_anchors
from .augment import AnnotatedClip, AugmentPipeline
from .checkpoint import save_checkpoint
from .config import AnchorConfig, AugmentPolicy, LossConfig, TrainConfig
from .errors import ConfigurationError, NonFiniteError, TrainingDivergedError
from .helpers import atomic_write_text
from .layers import Parameter
from .losses import batch_detection_loss
from .network import Detector


logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "epoch", "lr", "cls_loss", "reg_loss", "total")


# == Schedule ==================================================================


def lr_at(iteration: int, iters_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to `lr_max`, then cosine from `lr_max` to `lr_min` restarting every cycle."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration < cfg.warmup_iters:
        return cfg.warmup_start_lr + (cfg.lr_max - cfg.warmup_start_lr) * iteration / cfg.warmup_iters
    cycle_iters = max(1, cfg.cycle_epochs * max(1, iters_per_epoch))
    phase = ((iteration - cfg.warmup_iters) % cycle_iters) / cycle_iters
    return cfg.lr_max - (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 - math.cos(math.pi * phase))


# == Optimizer =================================================================


def sgd_update(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One step: `v <- momentum * v + (grad + wd * param)`, `param <- param - lr * v`."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient", {"non_finite": int((~np.isfinite(grad)).sum())})
    velocity = momentum * velocity + (grad + weight_decay * param)
    return param - lr * velocity, velocity


class SGD:
    """Momentum SGD over named parameters; frozen ones are never touched."""

    def __init__(self, named_parameters: Sequence[Tuple[str, Parameter]], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.params = list(named_parameters)
        self.velocity: Dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def decay_for(self, name: str) -> float:
        if any(fnmatch.fnmatchcase(name, pattern) for pattern in self.cfg.decay_exclude):
            return 0.0
        return self.cfg.weight_decay

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad ** 2)) for _, p in self.params if not p.frozen))

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.cfg.grad_clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.cfg.grad_clip_norm:
                scale = self.cfg.grad_clip_norm / norm
        for name, param in self.params:
            if param.frozen:
                continue
            try:
                param.data, self.velocity[name] = sgd_update(
                    param.data, param.grad * scale, self.velocity[name], lr, self.cfg.momentum, self.decay_for(name),
                )
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite gradient for {name}", {**exc.diagnostics, "parameter": name}) from exc


# == Batches ===================================================================


@dataclass
class Batch:
    """Model inputs and targets of one mini-batch."""

    epoch: int
    index: int
    inputs: Dict[str, np.ndarray]
    gt_segments: List[np.ndarray]
    gt_classes: List[np.ndarray]
    assignments: List[AssignmentResult]
    meta: List[Dict[str, Any]] = field(default_factory=list)


def clip_rng(seed: int, epoch: int, position: int, stream: int = 0) -> np.random.Generator:
    """The augmentation stream of one sample, independent of worker scheduling."""
    return np.random.default_rng([seed, stream, epoch, position])


def prepare_batch(
    clips: Sequence[AnnotatedClip],
    positions: Sequence[int],
    epoch: int,
    index: int,
    pipeline: AugmentPipeline,
    anchors: AnchorSet,
    anchor_cfg: AnchorConfig,
    cfg: TrainConfig,
) -> Batch:
    views = [
        pipeline(clip, cfg.clip_len, clip_rng(cfg.seed, epoch, pos, pipeline.policy.seed))
        for clip, pos in zip(clips, positions)
    ]
    if all(v.features is not None for v in views):
        inputs = {"features": np.stack([np.asarray(v.features, dtype=np.float64) for v in views])}
    elif all(v.pixels is not None for v in views):
        inputs = {"pixels": np.stack([np.asarray(v.pixels, dtype=np.float64) for v in views])}
    else:
        raise ConfigurationError("a batch mixes feature-sequence and frame clips")
    gts = [v.gt_array() for v in views]
    return Batch(
        epoch=epoch,
        index=index,
        inputs=inputs,
        gt_segments=gts,
        gt_classes=[v.gt_classes() for v in views],
        assignments=[assign_arrays(anchors.segments, g, anchor_cfg.pos_thr, anchor_cfg.neg_thr) for g in gts],
        meta=[{"video_id": v.video_id, "origin": v.origin, "num_gts": len(v.gts)} for v in views],
    )


def _batch_plan(num_clips: int, epoch: int, cfg: TrainConfig) -> List[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(num_clips)
    return [order[i:i + cfg.batch_size] for i in range(0, num_clips, cfg.batch_size)]


def iter_batches(
    dataset: Sequence[AnnotatedClip],
    epoch: int,
    pipeline: AugmentPipeline,
    anchors: AnchorSet,
    anchor_cfg: AnchorConfig,
    cfg: TrainConfig,
    workers: int = 0,
) -> Iterator[Batch]:
    """Shuffled mini-batches; with workers the next batch is augmented while the current one trains."""
    plan = _batch_plan(len(dataset), epoch, cfg)

    def build(index: int) -> Batch:
        positions = plan[index]
        return prepare_batch([dataset[int(i)] for i in positions], [int(i) for i in positions],
                             epoch, index, pipeline, anchors, anchor_cfg, cfg)

    if workers <= 0:
        for index in range(len(plan)):
            yield build(index)
        return

    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: List[Future[Batch]] = [pool.submit(build, i) for i in range(min(workers, len(plan)))]
        for index in range(len(plan)):
            batch = pending.pop(0).result()
            upcoming = index + len(pending) + 1
            if upcoming < len(plan):
                pending.append(pool.submit(build, upcoming))
            yield batch


# == Loop ======================================================================


@dataclass
class FitResult:
    log_path: Path
    checkpoint_path: Path
    iterations: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")


def _dump_divergence(out_dir: Path, row: Dict[str, float], batch: Batch) -> Path:
    payload = {"iteration": row, "epoch": batch.epoch, "batch_index": batch.index, "clips": batch.meta}
    return atomic_write_text(out_dir / "diverged_batch.json", json.dumps(payload, indent=2, default=str))


def fit(
    dataset: Sequence[AnnotatedClip],
    model: Detector,
    cfg: TrainConfig,
    policy: AugmentPolicy,
    *,
    anchor_cfg: AnchorConfig,
    loss_cfg: LossConfig,
    out_dir: str | Path,
    progress: Optional[bool] = None,
) -> FitResult:
    """Train `model` in place; writes `metrics.csv`, periodic and final checkpoints.

    Raises `TrainingDivergedError` (after dumping the batch metadata to
    `diverged_batch.json`) when the loss stops being finite.
    """
    if not dataset:
        raise ConfigurationError("cannot fit on an empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anchors = generate_anchors(anchor_cfg, cfg.clip_len)
    pipeline = AugmentPipeline(policy, train=True)
    optimizer = SGD(list(model.named_parameters()), cfg)
    iters_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    workers = 0 if cfg.deterministic else cfg.workers
    if progress is None:
        progress = sys.stderr.isatty()

    result = FitResult(log_path=out / "metrics.csv", checkpoint_path=out / "final.tadw")
    logger.info("training on %d clips: %d epochs x %d iterations, clip_len %d, %d anchors",
                len(dataset), cfg.total_epochs, iters_per_epoch, cfg.clip_len, len(anchors))
    model.train()

    with result.log_path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        iteration = 0
        for epoch in tqdm(range(cfg.total_epochs), desc="epochs", unit="epoch", disable=not progress):
            epoch_losses: List[float] = []
            for batch in iter_batches(dataset, epoch, pipeline, anchors, anchor_cfg, cfg, workers):
                lr = lr_at(iteration, iters_per_epoch, cfg)
                model.zero_grad()
                output = model(**batch.inputs)
                cls, reg = model.flatten(output)
                row = {"iter": iteration, "epoch": epoch, "lr": lr,
                       "cls_loss": math.nan, "reg_loss": math.nan, "total": math.nan}
                try:
                    loss = batch_detection_loss(cls, reg, anchors.segments, batch.assignments,
                                                batch.gt_segments, batch.gt_classes, loss_cfg)
                except NonFiniteError:
                    loss = None
                else:
                    row.update(cls_loss=loss.cls_loss, reg_loss=loss.reg_loss, total=loss.total)
                if loss is None or not math.isfinite(loss.total):
                    model.clear_cache()
                    handle.flush()
                    dump = _dump_divergence(out, row, batch)
                    raise TrainingDivergedError(
                        f"loss became non-finite at iteration {iteration} (epoch {epoch}); batch dumped to {dump}",
                        {"iteration": iteration, "epoch": epoch, "clips": batch.meta},
                    )
                model.backward(model.unflatten(loss.grad_cls, loss.grad_reg, output.temporal_sizes))
                optimizer.step(lr)

                writer.writerow([iteration, epoch, f"{lr:.8g}", f"{loss.cls_loss:.8g}", f"{loss.reg_loss:.8g}", f"{loss.total:.8g}"])
                result.history.append(row)
                epoch_losses.append(loss.total)
                logger.debug("iter %d lr %.6f cls %.5f reg %.5f pos %d",
                             iteration, lr, loss.cls_loss, loss.reg_loss, loss.num_positive)
                iteration += 1
            handle.flush()
            logger.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.total_epochs, float(np.mean(epoch_losses)))
            if (epoch + 1) % cfg.checkpoint_interval == 0 and epoch + 1 < cfg.total_epochs:
                save_checkpoint(model, out / f"epoch_{epoch + 1:04d}.tadw")

    result.iterations = iteration
    save_checkpoint(model, result.checkpoint_path)
    return result
