"""Toy strided convolutional pyramid and SegFormer-style feature fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mrcfa.core import ops
from mrcfa.core.nn import Conv2d, Module, PointwiseConv
from mrcfa.core.tensor import DimensionError, Tensor


@dataclass
class MultiScaleFeatures:
    """Per-frame feature maps, shallow (large) to deep (small)."""

    scales: list[Tensor]
    frame_index: int = 0

    def __post_init__(self):
        for a, b in zip(self.scales, self.scales[1:]):
            if b.shape[1] > a.shape[1] or b.shape[2] > a.shape[2]:
                raise DimensionError(f"scale sizes must not increase: {a.shape} then {b.shape}")

    @property
    def num_scales(self) -> int:
        return len(self.scales)

    def dims(self, level: int) -> tuple[int, int]:
        return self.scales[level].shape[1], self.scales[level].shape[2]


@dataclass
class FusedFeature:
    tensor: Tensor  # [C_hat x H_1 x W_1]


class Stage(Module):
    """A run of 3x3 stride-2 convolutions with relu, reducing resolution by ``factor``."""

    def __init__(self, c_in: int, c_out: int, factor: int, rng: np.random.Generator, bias: bool = True):
        if factor < 1 or factor & (factor - 1):
            raise ValueError(f"stage factor must be a power of two, got {factor}")
        n = max(1, int(np.log2(factor)))
        self.convs = []
        c = c_in
        for i in range(n):
            stride = 2 if factor > 1 else 1
            self.convs.append(Conv2d(c, c_out, 3, rng, stride=stride, padding=1, bias=bias))
            c = c_out

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


class Encoder(Module):
    """Plain strided pyramid. Each stage's output is one scale.

    ``strides`` are cumulative (4, 8, 16 by default); only the last
    ``num_scales`` stage outputs are returned, matching the use of the
    deepest blocks of a backbone.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        channels: Sequence[int] = (16, 32, 64),
        strides: Sequence[int] = (4, 8, 16),
        num_scales: int | None = None,
        in_channels: int = 3,
        bias: bool = True,
    ):
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have the same length")
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.num_scales = len(self.channels) if num_scales is None else int(num_scales)
        if not 1 <= self.num_scales <= len(self.channels):
            raise ValueError(f"num_scales={self.num_scales} outside [1, {len(self.channels)}]")
        self.stages = []
        prev_c, prev_s = in_channels, 1
        for c, s in zip(self.channels, self.strides):
            if s % prev_s:
                raise ValueError(f"strides must be nested multiples, got {self.strides}")
            self.stages.append(Stage(prev_c, c, s // prev_s, rng, bias=bias))
            prev_c, prev_s = c, s

    @property
    def used_channels(self) -> tuple[int, ...]:
        return self.channels[-self.num_scales :]

    @property
    def used_strides(self) -> tuple[int, ...]:
        return self.strides[-self.num_scales :]

    def scale_dims(self, h: int, w: int) -> list[tuple[int, int]]:
        self.check_input(h, w)
        return [(h // s, w // s) for s in self.used_strides]

    def check_input(self, h: int, w: int) -> None:
        deepest = self.strides[-1]
        if h % deepest or w % deepest:
            raise DimensionError(f"input {h}x{w} is not divisible by the deepest stride {deepest}")

    def __call__(self, frame: Tensor, frame_index: int = 0) -> MultiScaleFeatures:
        if frame.ndim != 3:
            raise DimensionError(f"encode expects [3 x H x W], got {frame.shape}")
        self.check_input(frame.shape[1], frame.shape[2])
        outs = []
        x = frame
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return MultiScaleFeatures(outs[-self.num_scales :], frame_index)


class Fuse(Module):
    """Project every scale to ``C_hat`` channels, upsample to the largest, sum, 1x1 conv."""

    def __init__(self, in_channels: Sequence[int], c_hat: int, rng: np.random.Generator, bias: bool = True):
        self.proj = [PointwiseConv(c, c_hat, rng, bias=bias) for c in in_channels]
        self.out = PointwiseConv(c_hat, c_hat, rng, bias=bias)
        self.c_hat = c_hat

    def __call__(self, feats: MultiScaleFeatures) -> FusedFeature:
        if len(feats.scales) != len(self.proj):
            raise DimensionError(f"fuse configured for {len(self.proj)} scales, got {len(feats.scales)}")
        target = feats.dims(0)
        parts = [ops.bilinear_upsample(proj(f), target) for proj, f in zip(self.proj, feats.scales)]
        return FusedFeature(self.out(ops.add_n(parts)))
