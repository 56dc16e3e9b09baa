"""The detector: desk backbone + SRM, TDM + TFPN neck, shared TPM head."""

from __future__ import annotations

import logging
import math

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import NetConfig
from .errors import ConfigurationError, ShapeError
from .layers import Conv1d, Module, Parameter, ReLU, Sequential, conv_stack, kaiming_uniform


logger = logging.getLogger(__name__)

TEMPORAL_POOL = 8
SPATIAL_POOL = 32
CONV_SRM_GRID = (4, 4)
# pooled pixels are mapped from [0, 255] to [-1, 1]
PIXEL_HALF_RANGE = 127.5


def _ceil_pool_axis(x: np.ndarray, axis: int, factor: int) -> np.ndarray:
    """Mean over consecutive blocks of `factor`; a trailing partial block averages what it has."""
    size = x.shape[axis]
    starts = np.arange(0, size, factor)
    counts = np.minimum(starts + factor, size) - starts
    sums = np.add.reduceat(x, starts, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = len(starts)
    return sums / counts.reshape(shape)


class DeskBackbone(Module):
    """Fixed average pooling (8 in time, 32 in space, ceil mode), rescaling to [-1, 1],
    then a learned pointwise projection + ReLU.

    `(B, 3, T, H, W)` -> `(B, C_b, T/8, ceil(H/32), ceil(W/32))`.
    """

    def __init__(self, out_channels: int, frozen: bool = False, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.out_channels = out_channels
        self.weight = Parameter(kaiming_uniform((out_channels, 3), 3, rng), frozen=frozen)
        self.bias = Parameter(np.zeros(out_channels), frozen=frozen)

    @staticmethod
    def pool(pixels: np.ndarray) -> np.ndarray:
        if pixels.ndim != 5 or pixels.shape[1] != 3:
            raise ShapeError(f"backbone expects (B, 3, T, H, W), got {pixels.shape}")
        batch, _, frames, height, width = pixels.shape
        if frames % TEMPORAL_POOL:
            raise ConfigurationError(f"clip length {frames} must be divisible by {TEMPORAL_POOL}")
        x = np.asarray(pixels, dtype=np.float64).reshape(batch, 3, frames // TEMPORAL_POOL, TEMPORAL_POOL, height, width).mean(axis=3)
        x = _ceil_pool_axis(x, 3, SPATIAL_POOL)
        return _ceil_pool_axis(x, 4, SPATIAL_POOL) / PIXEL_HALF_RANGE - 1.0

    def forward(self, pixels: np.ndarray) -> np.ndarray:
        pooled = self.pool(pixels)
        pre = np.einsum("ck,bkthw->bcthw", self.weight.data, pooled) + self.bias.data[None, :, None, None, None]
        mask = pre > 0
        self._push((pooled, mask))
        return np.where(mask, pre, 0.0)

    def backward(self, dout: np.ndarray) -> None:
        pooled, mask = self._pop()
        if self.weight.frozen and self.bias.frozen:
            return None
        dpre = np.where(mask, dout, 0.0)
        self.weight.accumulate(np.einsum("bcthw,bkthw->ck", dpre, pooled))
        self.bias.accumulate(dpre.sum(axis=(0, 2, 3, 4)))
        # pooling is fixed and pixels carry no gradient
        return None


class SpatialReduction(Module):
    """Collapse `(B, C, T, H, W)` to `(B, C, T)` by average, max, or a learned per-channel 4x4 map."""

    def __init__(self, channels: int, mode: str = "avg", rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if mode not in ("avg", "max", "conv"):
            raise ConfigurationError(f"unknown SRM mode {mode!r}")
        self.mode = mode
        self.channels = channels
        if mode == "conv":
            rng = rng or np.random.default_rng(0)
            cells = CONV_SRM_GRID[0] * CONV_SRM_GRID[1]
            self.weight = Parameter(kaiming_uniform((channels, cells), cells, rng))
            self.bias = Parameter(np.zeros(channels))

    def forward(self, feat: np.ndarray) -> np.ndarray:
        if feat.ndim != 5 or feat.shape[1] != self.channels:
            raise ShapeError(f"SRM expects (B, {self.channels}, T, H, W), got {feat.shape}")
        batch, channels, length, height, width = feat.shape
        flat = feat.reshape(batch, channels, length, height * width)
        if self.mode == "avg":
            self._push(feat.shape)
            return flat.mean(axis=3)
        if self.mode == "max":
            arg = flat.argmax(axis=3)
            self._push((feat.shape, arg))
            return np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]
        if (height, width) != CONV_SRM_GRID:
            raise ConfigurationError(f"conv SRM needs a {CONV_SRM_GRID[0]}x{CONV_SRM_GRID[1]} grid, got {height}x{width}")
        self._push(flat)
        return np.einsum("bctj,cj->bct", flat, self.weight.data) + self.bias.data[None, :, None]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cached = self._pop()
        if self.mode == "avg":
            shape = cached
            cells = shape[3] * shape[4]
            return np.broadcast_to((dout / cells)[..., None, None], shape).copy()
        if self.mode == "max":
            shape, arg = cached
            grad = np.zeros(shape[:3] + (shape[3] * shape[4],))
            np.put_along_axis(grad, arg[..., None], dout[..., None], axis=3)
            return grad.reshape(shape)
        flat = cached
        self.weight.accumulate(np.einsum("bct,bctj->cj", dout, flat))
        self.bias.accumulate(dout.sum(axis=(0, 2)))
        grad = dout[..., None] * self.weight.data[None, :, None, :]
        return grad.reshape(flat.shape[:3] + CONV_SRM_GRID)


class TemporalDownsample(Module):
    """Stacked stride-2 kernel-3 convs; returns the input plus one sequence per conv."""

    def __init__(self, in_channels: int, channels: int, num_levels: int = 5, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        widths = [in_channels] + [channels] * (num_levels - 1)
        self.convs = [Sequential(Conv1d(c_in, c_out, 3, 2, rng=rng), ReLU()) for c_in, c_out in zip(widths, widths[1:])]

    @property
    def reduction(self) -> int:
        return 2 ** len(self.convs)

    def forward(self, seq: np.ndarray) -> List[np.ndarray]:
        if seq.shape[-1] % self.reduction:
            raise ConfigurationError(f"sequence length {seq.shape[-1]} must be divisible by {self.reduction}")
        levels = [seq]
        for conv in self.convs:
            levels.append(conv(levels[-1]))
        return levels

    def backward(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        grad = grads[-1]
        for level in range(len(self.convs) - 1, -1, -1):
            grad = grads[level] + self.convs[level].backward(grad)
        return grad


class TemporalFPN(Module):
    """Lateral pointwise convs, nearest x2 top-down merge by addition, kernel-3 smoothing."""

    def __init__(self, in_channels: Sequence[int], channels: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.laterals = [Conv1d(c, channels, 1, rng=rng) for c in in_channels]
        self.smooths = [Conv1d(channels, channels, 3, rng=rng) for _ in in_channels]

    def forward(self, levels: Sequence[np.ndarray]) -> List[np.ndarray]:
        if len(levels) != len(self.laterals):
            raise ShapeError(f"TFPN expects {len(self.laterals)} levels, got {len(levels)}")
        merged: List[np.ndarray] = [lateral(x) for lateral, x in zip(self.laterals, levels)]
        for i in range(len(merged) - 2, -1, -1):
            upper = merged[i + 1]
            if merged[i].shape[2] != 2 * upper.shape[2]:
                raise ShapeError(f"TFPN level {i} has length {merged[i].shape[2]}, expected {2 * upper.shape[2]}")
            merged[i] = merged[i] + np.repeat(upper, 2, axis=2)
        return [smooth(m) for smooth, m in zip(self.smooths, merged)]

    def backward(self, grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        dmerged = [smooth.backward(g) for smooth, g in zip(self.smooths, grads)]
        for i in range(len(dmerged) - 1):
            b, c, t = dmerged[i].shape
            dmerged[i + 1] = dmerged[i + 1] + dmerged[i].reshape(b, c, t // 2, 2).sum(axis=3)
        return [lateral.backward(d) for lateral, d in zip(self.laterals, dmerged)]


class TemporalPredictionHead(Module):
    """Classification and regression branches shared by every pyramid level.

    Per level the classification output is `(B, A*K, T')` laid out anchor-major
    (channel `a * K + k`), the regression output `(B, A*2, T')` as `a * 2 + j`.
    """

    def __init__(self, in_channels: int, channels: int, num_convs: int, num_classes: int, num_anchors: int,
                 prior_prob: float = 0.01, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.num_classes = num_classes
        self.num_anchors = num_anchors
        widths = [in_channels] + [channels] * num_convs
        self.cls_convs = conv_stack(widths, 3, 1, rng)
        self.cls_out = Conv1d(widths[-1], num_classes * num_anchors, 3, rng=rng)
        self.reg_convs = conv_stack(widths, 3, 1, rng)
        self.reg_out = Conv1d(widths[-1], 2 * num_anchors, 3, rng=rng)
        self.cls_out.bias.data[:] = -math.log((1.0 - prior_prob) / prior_prob)

    def forward(self, pyramid: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        cls_levels, reg_levels = [], []
        for feat in pyramid:
            cls_levels.append(self.cls_out(self.cls_convs(feat)))
            reg_levels.append(self.reg_out(self.reg_convs(feat)))
        return cls_levels, reg_levels

    def backward(self, grads: Tuple[Sequence[np.ndarray], Sequence[np.ndarray]]) -> List[np.ndarray]:
        d_cls, d_reg = grads
        out: List[np.ndarray] = [np.empty(0)] * len(d_cls)
        # reverse level order pops the shared caches correctly
        for level in range(len(d_cls) - 1, -1, -1):
            d_reg_feat = self.reg_convs.backward(self.reg_out.backward(d_reg[level]))
            d_cls_feat = self.cls_convs.backward(self.cls_out.backward(d_cls[level]))
            out[level] = d_cls_feat + d_reg_feat
        return out


@dataclass
class DetectorOutput:
    """Raw head outputs per level."""

    cls_levels: List[np.ndarray]
    reg_levels: List[np.ndarray]

    @property
    def temporal_sizes(self) -> List[int]:
        return [c.shape[2] for c in self.cls_levels]


class Detector(Module):
    """Backbone + SRM -> TDM -> TFPN -> TPM.

    `forward(pixels=...)` runs the whole network; `forward(features=...)` feeds a
    precomputed `(B, C_b, T/8)` sequence straight into the TDM.
    """

    def __init__(self, config: NetConfig) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = DeskBackbone(config.backbone_channels, config.frozen, rng)
        self.srm = SpatialReduction(config.backbone_channels, config.srm_mode, rng)
        self.tdm = TemporalDownsample(config.backbone_channels, config.tdm_channels, config.num_levels, rng)
        widths = [config.backbone_channels] + [config.tdm_channels] * (config.num_levels - 1)
        self.tfpn = TemporalFPN(widths, config.fpn_channels, rng)
        self.head = TemporalPredictionHead(
            config.fpn_channels, config.head_channels, config.head_convs,
            config.num_classes, config.anchors_per_position, config.prior_prob, rng,
        )

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def num_anchors(self) -> int:
        return self.config.anchors_per_position

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        """Backbone + SRM: `(B, 3, T, H, W)` -> `(B, C_b, T/8)`."""
        return self.srm(self.backbone(pixels))

    def forward(self, pixels: Optional[np.ndarray] = None, features: Optional[np.ndarray] = None) -> DetectorOutput:
        if (pixels is None) == (features is None):
            raise ValueError("pass exactly one of pixels or features")
        from_pixels = pixels is not None
        if from_pixels:
            features = self.extract(pixels)
        assert features is not None
        if features.ndim != 3 or features.shape[1] != self.config.backbone_channels:
            raise ShapeError(f"feature sequence must be (B, {self.config.backbone_channels}, T/8), got {features.shape}")
        self._push(from_pixels)
        pyramid = self.tfpn(self.tdm(np.asarray(features, dtype=np.float64)))
        cls_levels, reg_levels = self.head(pyramid)
        return DetectorOutput(cls_levels, reg_levels)

    def backward(self, grads: DetectorOutput) -> None:
        from_pixels = self._pop()
        d_pyramid = self.head.backward((grads.cls_levels, grads.reg_levels))
        d_features = self.tdm.backward(self.tfpn.backward(d_pyramid))
        if from_pixels:
            self.backbone.backward(self.srm.backward(d_features))

    # -- anchor-ordered views ---------------------------------------------------

    def flatten(self, output: DetectorOutput) -> Tuple[np.ndarray, np.ndarray]:
        """`(B, N, K)` logits and `(B, N, 2)` offsets in anchor order (level, position, scale)."""
        k, a = self.num_classes, self.num_anchors
        cls_parts, reg_parts = [], []
        for cls, reg in zip(output.cls_levels, output.reg_levels):
            b, _, t = cls.shape
            cls_parts.append(cls.reshape(b, a, k, t).transpose(0, 3, 1, 2).reshape(b, t * a, k))
            reg_parts.append(reg.reshape(b, a, 2, t).transpose(0, 3, 1, 2).reshape(b, t * a, 2))
        return np.concatenate(cls_parts, axis=1), np.concatenate(reg_parts, axis=1)

    def unflatten(self, d_cls: np.ndarray, d_reg: np.ndarray, sizes: Sequence[int]) -> DetectorOutput:
        """Inverse of `flatten`, for gradients."""
        k, a = self.num_classes, self.num_anchors
        cls_levels, reg_levels = [], []
        offset = 0
        for t in sizes:
            span = slice(offset, offset + t * a)
            b = d_cls.shape[0]
            cls_levels.append(d_cls[:, span].reshape(b, t, a, k).transpose(0, 2, 3, 1).reshape(b, a * k, t))
            reg_levels.append(d_reg[:, span].reshape(b, t, a, 2).transpose(0, 2, 3, 1).reshape(b, a * 2, t))
            offset += t * a
        if offset != d_cls.shape[1]:
            raise ShapeError(f"gradients cover {d_cls.shape[1]} anchors, levels hold {offset}")
        return DetectorOutput(cls_levels, reg_levels)
