"""Sigmoid focal classification loss and DIoU regression loss, combined per clip."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from scipy.special import expit, log_expit

from .anchors import AssignmentResult, decode_arrays, decode_backward
from .config import LossConfig
from .errors import ShapeError, UnknownClassError
from .segments import diou_loss_arrays
from .types import FloatArray, IntArray, SegmentArray


def sigmoid_focal_loss(logits: FloatArray, targets: FloatArray, alpha: float = 0.25, gamma: float = 2.0) -> Tuple[FloatArray, FloatArray]:
    """Elementwise `-alpha_t (1 - p_t)^gamma log p_t` and its derivative w.r.t. the logits.

    Evaluated on the signed logit `z = x` (target 1) or `z = -x` (target 0), so
    `p_t = sigmoid(z)` and `1 - p_t = sigmoid(-z)` never cancel.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sign = 2.0 * targets - 1.0
    z = sign * logits
    p_t = expit(z)
    one_minus = expit(-z)
    log_p_t = log_expit(z)
    alpha_t = np.where(targets > 0.5, alpha, 1.0 - alpha)
    modulator = one_minus ** gamma
    loss = -alpha_t * modulator * log_p_t
    dz = alpha_t * modulator * (gamma * p_t * log_p_t - one_minus)
    return loss, sign * dz


def focal_loss(logit: float, target: int, cfg: LossConfig | None = None) -> Tuple[float, float]:
    cfg = cfg or LossConfig()
    loss, grad = sigmoid_focal_loss(np.array([logit]), np.array([float(target)]), cfg.focal_alpha, cfg.focal_gamma)
    return float(loss[0]), float(grad[0])


@dataclass
class LossResult:
    """Loss terms of one clip (or a batch mean) and gradients w.r.t. the raw head outputs."""

    total: float
    cls_loss: float
    reg_loss: float
    num_positive: int
    grad_cls: FloatArray
    grad_reg: FloatArray


def detection_loss(
    cls_logits: FloatArray,
    reg_offsets: FloatArray,
    anchors: SegmentArray,
    assignment: AssignmentResult,
    gt_segments: SegmentArray,
    gt_classes: IntArray,
    cfg: LossConfig,
) -> LossResult:
    """Focal loss over non-ignored anchors plus `reg_weight` x DIoU over positives, both / max(N_pos, 1).

    `cls_logits` is `(N, K)`, `reg_offsets` `(N, 2)`, both in anchor order.
    """
    num_anchors = anchors.shape[0]
    if cls_logits.ndim != 2 or cls_logits.shape[0] != num_anchors:
        raise ShapeError(f"cls logits {cls_logits.shape} do not match {num_anchors} anchors")
    if reg_offsets.shape != (num_anchors, 2):
        raise ShapeError(f"regression offsets {reg_offsets.shape} do not match {num_anchors} anchors")
    if assignment.labels.shape[0] != num_anchors:
        raise ShapeError(f"assignment covers {assignment.labels.shape[0]} anchors, expected {num_anchors}")

    labels = assignment.labels
    positive = labels >= 0
    considered = labels != -2
    num_pos = int(positive.sum())
    norm = 1.0 / max(num_pos, 1)

    targets = np.zeros_like(cls_logits)
    if num_pos:
        pos_idx = np.flatnonzero(positive)
        pos_classes = np.asarray(gt_classes)[labels[pos_idx]]
        if pos_classes.max() >= cls_logits.shape[1]:
            raise UnknownClassError(f"gt class {int(pos_classes.max())} outside [0, {cls_logits.shape[1]})")
        targets[pos_idx, pos_classes] = 1.0
    cls_terms, cls_grad = sigmoid_focal_loss(cls_logits, targets, cfg.focal_alpha, cfg.focal_gamma)
    mask = considered[:, None]
    cls_loss = float(np.where(mask, cls_terms, 0.0).sum()) * norm
    grad_cls = np.where(mask, cls_grad, 0.0) * norm

    grad_reg = np.zeros_like(reg_offsets)
    reg_loss = 0.0
    if num_pos:
        pos_anchors = anchors[positive]
        pos_offsets = reg_offsets[positive]
        decoded = decode_arrays(pos_anchors, pos_offsets)
        matched = np.asarray(gt_segments, dtype=np.float64)[labels[positive]]
        terms, grad_seg = diou_loss_arrays(decoded, matched)
        reg_loss = cfg.reg_weight * float(terms.sum()) * norm
        grad_reg[positive] = decode_backward(pos_anchors, pos_offsets, grad_seg) * (cfg.reg_weight * norm)

    return LossResult(
        total=cls_loss + reg_loss,
        cls_loss=cls_loss,
        reg_loss=reg_loss,
        num_positive=num_pos,
        grad_cls=grad_cls,
        grad_reg=grad_reg,
    )


def batch_detection_loss(
    cls_logits: FloatArray,
    reg_offsets: FloatArray,
    anchors: SegmentArray,
    assignments: Sequence[AssignmentResult],
    gt_segments: Sequence[SegmentArray],
    gt_classes: Sequence[IntArray],
    cfg: LossConfig,
) -> LossResult:
    """Mean of the per-clip losses over a `(B, N, K)` / `(B, N, 2)` batch."""
    batch = cls_logits.shape[0]
    results = [
        detection_loss(cls_logits[b], reg_offsets[b], anchors, assignments[b], gt_segments[b], gt_classes[b], cfg)
        for b in range(batch)
    ]
    scale = 1.0 / batch
    return LossResult(
        total=sum(r.total for r in results) * scale,
        cls_loss=sum(r.cls_loss for r in results) * scale,
        reg_loss=sum(r.reg_loss for r in results) * scale,
        num_positive=sum(r.num_positive for r in results),
        grad_cls=np.stack([r.grad_cls for r in results]) * scale,
        grad_reg=np.stack([r.grad_reg for r in results]) * scale,
    )
