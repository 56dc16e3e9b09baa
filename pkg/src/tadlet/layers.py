"""Differentiable building blocks with explicit reverse passes.

Every module caches what its backward needs on a stack: `forward` pushes,
`backward` pops. A module applied several times in one pass (the shared
prediction head) therefore has to be back-propagated in reverse call order.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Any, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass(eq=False)
class Parameter:
    """A learned array and its gradient buffer."""

    data: np.ndarray
    grad: np.ndarray = field(init=False)
    frozen: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.frozen:
            self.grad += grad


def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: forward / backward with a cache stack, parameter discovery."""

    def __init__(self) -> None:
        self.training = True
        self._cache: List[Any] = []

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def backward(self, dout: Any) -> Any:
        raise NotImplementedError

    # -- cache -----------------------------------------------------------------

    def _push(self, item: Any) -> None:
        if self.training:
            self._cache.append(item)

    def _pop(self) -> Any:
        if not self._cache:
            raise RuntimeError(f"{self.__class__.__name__}.backward() without a matching training-mode forward()")
        return self._cache.pop()

    def clear_cache(self) -> None:
        for module in self.modules():
            module._cache.clear()

    # -- tree ------------------------------------------------------------------

    def named_children(self) -> Iterator[Tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator[Module]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> Module:
        for module in self.modules():
            module.training = mode
            if not mode:
                module._cache.clear()
        return self

    def eval(self) -> Module:
        return self.train(False)


class Conv1d(Module):
    """Cross-correlation over `(B, C_in, T)` with zero padding.

    With kernel 3 and padding 1, stride 1 preserves T and stride 2 halves it.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size
        self.weight = Parameter(kaiming_uniform((out_channels, in_channels, kernel_size), fan_in, rng))
        self.bias = Parameter(np.zeros(out_channels))

    def output_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv1d expects (B, {self.in_channels}, T), got {x.shape}")
        if self.output_length(x.shape[2]) < 1:
            raise ShapeError(f"Conv1d input length {x.shape[2]} too short for kernel {self.kernel_size}")
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        cols = sliding_window_view(padded, self.kernel_size, axis=2)[:, :, ::self.stride]
        out = np.tensordot(cols, self.weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        out = out + self.bias.data[None, :, None]
        self._push((cols, x.shape))
        return np.ascontiguousarray(out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, in_shape = self._pop()
        if dout.shape[:2] != (in_shape[0], self.out_channels) or dout.shape[2] != cols.shape[2]:
            raise ShapeError(f"Conv1d gradient shape {dout.shape} does not match its forward output")
        self.weight.accumulate(np.tensordot(dout, cols, axes=([0, 2], [0, 2])))
        self.bias.accumulate(dout.sum(axis=(0, 2)))

        dcols = np.tensordot(dout, self.weight.data, axes=([1], [0]))  # (B, T_out, C_in, K)
        batch, channels, length = in_shape
        p, s = self.padding, self.stride
        dpadded = np.zeros((batch, channels, length + 2 * p))
        t_out = dout.shape[2]
        for k in range(self.kernel_size):
            dpadded[:, :, k:k + s * (t_out - 1) + 1:s] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dpadded[:, :, p:p + length] if p else dpadded


class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._push(mask)
        return np.where(mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._pop(), dout, 0.0)


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def conv_stack(channels: Sequence[int], kernel_size: int, stride: int, rng: np.random.Generator) -> Sequential:
    """Conv + ReLU for every consecutive channel pair."""
    layers: List[Module] = []
    for c_in, c_out in zip(channels, channels[1:]):
        layers += [Conv1d(c_in, c_out, kernel_size, stride, rng=rng), ReLU()]
    return Sequential(*layers)
