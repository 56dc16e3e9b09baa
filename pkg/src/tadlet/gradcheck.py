"""Central finite-difference check of the hand-written reverse passes."""

from __future__ import annotations

import logging

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .anchors import assign_arrays, generate_anchors
from .config import AnchorConfig, LossConfig, NetConfig
from .errors import ShapeError
from .layers import Conv1d, Module
from .losses import detection_loss, sigmoid_focal_loss
from .network import DeskBackbone, Detector, SpatialReduction, TemporalDownsample, TemporalFPN, TemporalPredictionHead


logger = logging.getLogger(__name__)

GradTargets = Mapping[str, Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    num_checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.num_checked > 0 and self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel error {self.max_rel_error:.3e} over "
                f"{self.num_checked} entries (tol {self.tolerance:.0e}, worst {self.worst or '-'})")


def grad_check(
    loss: Callable[[], float],
    targets: GradTargets,
    *,
    name: str = "op",
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    atol: float = 1e-6,
    max_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients with `(f(x + eps) - f(x - eps)) / 2 eps`.

    `targets` maps a label to `(array, analytic_grad)`; each array is perturbed
    in place, one entry at a time, and `loss()` must read it. The relative error
    of an entry is `|a - n| / max(|a|, |n|, atol)`.
    """
    rng = rng or np.random.default_rng(0)
    worst_error, worst, checked = 0.0, "", 0
    for label, (array, analytic) in targets.items():
        flat = array.reshape(-1)
        if not np.shares_memory(flat, array):
            raise ValueError(f"{label}: array must be contiguous to be perturbed in place")
        grad = np.asarray(analytic, dtype=np.float64).reshape(-1)
        if grad.shape != flat.shape:
            raise ShapeError(f"{label}: gradient has {grad.size} entries, array has {flat.size}")
        indices = np.arange(flat.size)
        if max_samples is not None and flat.size > max_samples:
            indices = np.sort(rng.choice(flat.size, size=max_samples, replace=False))
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = loss()
            flat[i] = original - eps
            minus = loss()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(numeric - grad[i]) / max(abs(numeric), abs(grad[i]), atol)
            checked += 1
            if error > worst_error:
                worst_error, worst = error, f"{label}[{i}]"

    report = GradCheckReport(name, worst_error, tolerance, checked, worst)
    logger.log(logging.INFO if report.passed else logging.WARNING, "%s", report)
    return report


# == Module cases ==============================================================


def _cotangent_like(value: Any, rng: np.random.Generator) -> Any:
    if isinstance(value, np.ndarray):
        return rng.standard_normal(value.shape)
    return type(value)(_cotangent_like(v, rng) for v in value)


def _dot(value: Any, cotangent: Any) -> float:
    if isinstance(value, np.ndarray):
        return float(np.sum(value * cotangent))
    return sum(_dot(v, p) for v, p in zip(value, cotangent))


def check_module(
    name: str,
    module: Module,
    forward: Callable[[], Any],
    backward: Callable[[Any], Dict[str, np.ndarray]],
    inputs: Mapping[str, np.ndarray],
    *,
    rng: np.random.Generator,
    tolerance: float = 1e-4,
    max_samples: Optional[int] = 24,
) -> GradCheckReport:
    """Check a module against the scalar `sum(forward() * cotangent)` for a random cotangent.

    `backward(cotangent)` runs the reverse pass and returns the input gradients
    keyed like `inputs`.
    """
    module.train()
    module.zero_grad()
    output = forward()
    cotangent = _cotangent_like(output, rng)
    input_grads = backward(cotangent)
    targets: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
        f"param:{n}": (p.data, p.grad.copy()) for n, p in module.named_parameters() if not p.frozen
    }
    for key, array in inputs.items():
        targets[f"input:{key}"] = (array, input_grads[key])

    module.eval()
    try:
        return grad_check(lambda: _dot(forward(), cotangent), targets, name=name, tolerance=tolerance,
                          max_samples=max_samples, rng=rng)
    finally:
        module.train()


def _conv_case(rng: np.random.Generator, stride: int) -> GradCheckReport:
    conv = Conv1d(3, 4, 3, stride, rng=rng)
    x = rng.standard_normal((2, 3, 12))
    return check_module(f"conv1d/stride{stride}", conv, lambda: conv(x), lambda d: {"x": conv.backward(d)},
                        {"x": x}, rng=rng, tolerance=1e-6, max_samples=None)


def _projection_case(rng: np.random.Generator) -> GradCheckReport:
    backbone = DeskBackbone(5, rng=rng)
    pixels = rng.uniform(0.0, 255.0, (1, 3, 16, 40, 40))
    return check_module("pointwise_projection", backbone, lambda: backbone(pixels),
                        lambda d: backbone.backward(d) or {}, {}, rng=rng, max_samples=None)


def _srm_case(rng: np.random.Generator, mode: str) -> GradCheckReport:
    srm = SpatialReduction(4, mode, rng=rng)
    feat = rng.standard_normal((2, 4, 3, 4, 4))
    return check_module(f"srm/{mode}", srm, lambda: srm(feat), lambda d: {"feat": srm.backward(d)},
                        {"feat": feat}, rng=rng)


def _tdm_case(rng: np.random.Generator) -> GradCheckReport:
    tdm = TemporalDownsample(4, 5, 3, rng=rng)
    seq = rng.standard_normal((1, 4, 16))
    return check_module("tdm", tdm, lambda: tdm(seq), lambda d: {"seq": tdm.backward(d)}, {"seq": seq}, rng=rng)


def _tfpn_case(rng: np.random.Generator) -> GradCheckReport:
    tfpn = TemporalFPN([4, 5, 5], 6, rng=rng)
    levels = [rng.standard_normal((1, 4, 16)), rng.standard_normal((1, 5, 8)), rng.standard_normal((1, 5, 4))]

    def backward(d: Any) -> Dict[str, np.ndarray]:
        return {f"level{i}": g for i, g in enumerate(tfpn.backward(d))}

    return check_module("tfpn", tfpn, lambda: tfpn(levels), backward,
                        {f"level{i}": x for i, x in enumerate(levels)}, rng=rng)


def _tpm_case(rng: np.random.Generator) -> GradCheckReport:
    head = TemporalPredictionHead(6, 5, 2, num_classes=2, num_anchors=3, rng=rng)
    pyramid = [rng.standard_normal((1, 6, 8)), rng.standard_normal((1, 6, 4))]

    def backward(d: Any) -> Dict[str, np.ndarray]:
        return {f"level{i}": g for i, g in enumerate(head.backward(d))}

    return check_module("tpm", head, lambda: head(pyramid), backward,
                        {f"level{i}": x for i, x in enumerate(pyramid)}, rng=rng)


def _focal_case(rng: np.random.Generator, cfg: LossConfig) -> GradCheckReport:
    logits = rng.uniform(-10.0, 10.0, 64)
    targets = (rng.random(64) < 0.5).astype(np.float64)
    _, grad = sigmoid_focal_loss(logits, targets, cfg.focal_alpha, cfg.focal_gamma)

    def loss() -> float:
        return float(sigmoid_focal_loss(logits, targets, cfg.focal_alpha, cfg.focal_gamma)[0].sum())

    return grad_check(loss, {"logits": (logits, grad)}, name="focal_loss", tolerance=1e-6, rng=rng)


def _detection_case(rng: np.random.Generator, cfg: LossConfig, seed: int) -> GradCheckReport:
    """The full objective w.r.t. every parameter of a small detector, pixels in."""
    net_cfg = NetConfig(backbone_channels=4, tdm_channels=6, fpn_channels=6, head_channels=6, head_convs=2,
                        num_classes=2, anchors_per_position=3, num_levels=3, seed=seed)
    anchor_cfg = AnchorConfig(strides=(8, 16, 32), base_sizes=(16.0, 32.0, 64.0)).with_num_scales(3)
    clip_len = 128
    model = Detector(net_cfg)
    anchors = generate_anchors(anchor_cfg, clip_len).segments
    pixels = np.broadcast_to(rng.uniform(0.0, 255.0, (1, 3, clip_len, 1, 1)), (1, 3, clip_len, 32, 32)).copy()
    gts = np.array([[20.0, 44.0], [60.0, 124.0]])
    classes = np.array([0, 1])
    assignment = assign_arrays(anchors, gts, anchor_cfg.pos_thr, anchor_cfg.neg_thr)

    def objective() -> Any:
        output = model(pixels=pixels)
        cls, reg = model.flatten(output)
        return output, detection_loss(cls[0], reg[0], anchors, assignment, gts, classes, cfg)

    model.train()
    model.zero_grad()
    output, result = objective()
    model.backward(model.unflatten(result.grad_cls[None], result.grad_reg[None], output.temporal_sizes))
    targets = {n: (p.data, p.grad.copy()) for n, p in model.named_parameters()}
    model.eval()
    try:
        return grad_check(lambda: objective()[1].total, targets, name="detection_loss", max_samples=12, rng=rng)
    finally:
        model.train()


def run_suite(loss_cfg: Optional[LossConfig] = None, seed: int = 0) -> List[GradCheckReport]:
    """Every learned operation plus the focal and full detection losses."""
    cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    reports = [
        _conv_case(rng, 1),
        _conv_case(rng, 2),
        _projection_case(rng),
        *(_srm_case(rng, mode) for mode in ("avg", "max", "conv")),
        _tdm_case(rng),
        _tfpn_case(rng),
        _tpm_case(rng),
        _focal_case(rng, cfg),
        _detection_case(rng, cfg, seed),
    ]
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.warning("gradient check failed for: %s", ", ".join(failed))
    else:
        logger.info("all %d gradient checks passed", len(reports))
    return reports
