"""Convolutional analysis/synthesis stacks and their hyperprior counterparts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA_FLOOR = 1e-6
SCALE_FLOOR = 1e-6

ANALYSIS = "analysis"
SYNTHESIS = "synthesis"
HYPER_ANALYSIS = "hyper-analysis"
HYPER_SYNTHESIS = "hyper-synthesis"


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-30))))


class Conv:
    """Convolution layer; ``up=True`` makes it a transposed (upsampling) conv."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, up: bool, rng: np.random.Generator, dtype=np.float32):
        self.c_in, self.c_out, self.kernel, self.stride, self.up = c_in, c_out, kernel, stride, up
        fan_in = c_in * kernel * kernel
        w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, transposed=self.up)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def describe(self) -> tuple:
        return ("conv", self.c_out, self.kernel, self.stride, "up" if self.up else "down")


class GDN:
    """Generalized divisive normalization with softplus-reparameterized beta, gamma."""

    def __init__(self, channels: int, inverse: bool = False, dtype=np.float32):
        self.channels = channels
        self.inverse = inverse
        self.beta_raw = Tensor(inv_softplus(np.ones(channels) - BETA_FLOOR).astype(dtype), requires_grad=True)
        # off-diagonals start at softplus(-12) ~ 6e-6, as close to zero as softplus allows
        g = np.full((channels, channels), -12.0)
        np.fill_diagonal(g, inv_softplus(0.1))
        self.gamma_raw = Tensor(g.astype(dtype), requires_grad=True)

    def beta(self) -> Tensor:
        return T.softplus(self.beta_raw) + BETA_FLOOR

    def gamma(self) -> Tensor:
        return T.softplus(self.gamma_raw)

    def __call__(self, x: Tensor) -> Tensor:
        return T.gdn(x, self.beta(), self.gamma(), inverse=self.inverse)

    def parameters(self) -> dict[str, Tensor]:
        return {"beta_raw": self.beta_raw, "gamma_raw": self.gamma_raw}

    def describe(self) -> tuple:
        return ("igdn" if self.inverse else "gdn",)


class ReLU:
    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def describe(self) -> tuple:
        return ("relu",)


@dataclass
class TransformStack:
    """Ordered layer list with a direction tag and total resampling factor."""

    direction: str
    layers: list = field(default_factory=list)
    in_channels: int = 3
    out_channels: int = 192

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"{self.direction} stack expects {self.in_channels} channels, got {x.shape[-3]}")
        if self.direction in (ANALYSIS, HYPER_ANALYSIS):
            factor = self.factor
            h, w = x.shape[-2:]
            if h % factor or w % factor:
                raise ValueError(f"spatial size {h}x{w} not divisible by {factor}; pad or crop first")
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def factor(self) -> int:
        f = 1
        for layer in self.layers:
            if isinstance(layer, Conv):
                f *= layer.stride
        return f

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                yield f"{i}.{name}", p

    def describe(self) -> list[tuple]:
        return [layer.describe() for layer in self.layers]


def analysis_stack(n: int, in_channels: int = 3, out_channels: Optional[int] = None, *, rng, dtype=np.float32) -> TransformStack:
    """Four stride-2 5x5 convs with GDN between; used for g_a and f."""
    out_channels = n if out_channels is None else out_channels
    chans = [in_channels, n, n, n, out_channels]
    layers: list = []
    for i in range(4):
        layers.append(Conv(chans[i], chans[i + 1], 5, 2, False, rng, dtype))
        if i < 3:
            layers.append(GDN(chans[i + 1], dtype=dtype))
    return TransformStack(ANALYSIS, layers, in_channels, out_channels)


def synthesis_stack(in_channels: int, n: int, out_channels: int = 3, *, rng, dtype=np.float32) -> TransformStack:
    """Four stride-2 5x5 transposed convs with IGDN between."""
    chans = [in_channels, n, n, n, out_channels]
    layers: list = []
    for i in range(4):
        layers.append(Conv(chans[i], chans[i + 1], 5, 2, True, rng, dtype))
        if i < 3:
            layers.append(GDN(chans[i + 1], inverse=True, dtype=dtype))
    return TransformStack(SYNTHESIS, layers, in_channels, out_channels)


def hyper_analysis_stack(n: int, in_channels: Optional[int] = None, *, rng, dtype=np.float32) -> TransformStack:
    in_channels = n if in_channels is None else in_channels
    layers = [
        Conv(in_channels, n, 3, 1, False, rng, dtype),
        ReLU(),
        Conv(n, n, 5, 2, False, rng, dtype),
        ReLU(),
        Conv(n, n, 5, 2, False, rng, dtype),
    ]
    return TransformStack(HYPER_ANALYSIS, layers, in_channels, n)


def hyper_synthesis_stack(n: int, out_channels: Optional[int] = None, *, rng, dtype=np.float32) -> TransformStack:
    out_channels = n if out_channels is None else out_channels
    layers = [
        Conv(n, n, 5, 2, True, rng, dtype),
        ReLU(),
        Conv(n, n, 5, 2, True, rng, dtype),
        ReLU(),
        Conv(n, out_channels, 3, 1, True, rng, dtype),
    ]
    return TransformStack(HYPER_SYNTHESIS, layers, n, out_channels)


def analyze(x: Tensor, stack: TransformStack) -> Tensor:
    return stack(x)


def synthesize(latents: Tensor, stack: TransformStack) -> Tensor:
    return stack(latents)


def common_info(y: Tensor, stack: TransformStack) -> Tensor:
    """Common-information latent ``w``, computed from the side image alone."""
    return stack(y)


def hyper_analyze(v: Tensor, stack: TransformStack) -> Tensor:
    return stack(T.tabs(v))


def hyper_synthesize(z: Tensor, stack: TransformStack) -> Tensor:
    """Per-element positive scales: ``softplus(h_s(z)) + 1e-6``."""
    return T.softplus(stack(z)) + SCALE_FLOOR
