"""Recombination and recalibration blocks.

All blocks preserve the input shape. The combined RR block expands the
channels by a factor m with a 1x1 convolution, recalibrates the expanded
representation (channel-wise, spatially adaptive, or one of the two
variants), and compresses back to the original width with a second 1x1
convolution. The recalibration bottleneck width is floor(expanded/r),
clamped to at least 1.
"""

from dataclasses import dataclass

import numpy as np

from .layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Module, avg_pool,
                     global_avg_pool, sigmoid)

BLOCK_KINDS = ("none", "recomb_only", "rr_se", "rr_segse", "rr_var1", "rr_var2")


@dataclass
class BlockConfig:
    """Declarative description of one recalibration block placement."""

    kind: str = "rr_segse"
    m: int = 4       # channel expansion factor
    r: int = 10      # reduction factor for the excitation bottleneck
    d: int = 1       # dilation rate (rr_segse, per placement scale)
    p: int = 2       # pooling size (rr_var2, per placement scale; even)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.m < 1 or self.r < 1 or self.d < 1:
            raise ValueError("m, r, d must all be >= 1")
        if self.kind == "rr_var2" and self.p % 2:
            raise ValueError(f"rr_var2 requires even pooling size, got p={self.p}")


def _bottleneck_width(channels, r):
    return max(channels // r, 1)


class ChannelSqueezeExcite(Module):
    """Channel-wise gating: global average pool, bottleneck, sigmoid scales.

    The two fully-connected layers are realized as 1x1 convolutions on
    the (N, C, 1, 1) squeeze output.
    """

    def __init__(self, channels, r, rng):
        super().__init__()
        mid = _bottleneck_width(channels, r)
        self.fc1 = Conv2d(channels, mid, 1, rng)
        self.fc2 = Conv2d(mid, channels, 1, rng)

    def excitation(self, x):
        z = global_avg_pool(x)
        return sigmoid(self.fc2(self.fc1(z).relu()))

    def forward(self, x):
        s = self.excitation(x)
        return x * s.broadcast_to(x.shape)


class SegSqueezeExcite(Module):
    """Spatially adaptive squeeze-and-excitation.

    Context is gathered by a dilated 3x3 convolution that doubles as the
    bottleneck, then batch norm + ReLU, a 1x1 convolution back to full
    width, and a sigmoid. The resulting excitation map has the full
    spatial resolution, so each channel is rescaled per location.
    """

    def __init__(self, channels, r, d, rng, k=3):
        super().__init__()
        mid = _bottleneck_width(channels, r)
        self.squeeze = Conv2d(channels, mid, k, rng, dilation=d)
        self.norm = BatchNorm2d(mid)
        self.restore = Conv2d(mid, channels, 1, rng)

    def excitation(self, x):
        z = self.norm(self.squeeze(x)).relu()
        return sigmoid(self.restore(z))

    def forward(self, x):
        return x * self.excitation(x)


class Var1SqueezeExcite(SegSqueezeExcite):
    """SegSE without spatial context: 1x1 kernels, no dilation."""

    def __init__(self, channels, r, rng):
        super().__init__(channels, r, 1, rng, k=1)


class Var2SqueezeExcite(Module):
    """Pooling-based context: average pool p, bottleneck 1x1 conv with
    batch norm + ReLU, then p/2 transposed-conv doubling stages (each
    with its own batch norm) and a final 1x1 conv + sigmoid back at the
    input resolution.
    """

    def __init__(self, channels, r, p, rng):
        super().__init__()
        if p % 2:
            raise ValueError(f"pooling size must be even, got {p}")
        self.p = p
        mid = _bottleneck_width(channels, r)
        self.reduce = Conv2d(channels, mid, 1, rng)
        self.norm = BatchNorm2d(mid)
        self.up_stages = []
        for i in range(p // 2):
            stage = ConvTranspose2d(mid, mid, rng)
            stage_norm = BatchNorm2d(mid)
            setattr(self, f"up{i}", stage)
            setattr(self, f"up_norm{i}", stage_norm)
            self.up_stages.append((stage, stage_norm))
        self.restore = Conv2d(mid, channels, 1, rng)

    def excitation(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % self.p or w % self.p:
            raise ValueError(f"input {h}x{w} not divisible by pooling size p={self.p}")
        z = self.norm(self.reduce(avg_pool(x, self.p))).relu()
        for stage, stage_norm in self.up_stages:
            z = stage_norm(stage(z))
        return sigmoid(self.restore(z))

    def forward(self, x):
        return x * self.excitation(x)


class RecalibrationBlock(Module):
    """Combined recombination and recalibration: expand -> recalibrate -> compress.

    kind "none" is an identity passthrough; "recomb_only" skips the
    recalibration stage. The expansion/compression 1x1 convolutions carry
    biases and no activation of their own.
    """

    def __init__(self, channels, config: BlockConfig, rng):
        super().__init__()
        self.channels = channels
        self.config = config
        if config.kind == "none":
            return
        expanded = config.m * channels
        self.expand = Conv2d(channels, expanded, 1, rng)
        self.compress = Conv2d(expanded, channels, 1, rng)
        if config.kind == "rr_se":
            self.recal = ChannelSqueezeExcite(expanded, config.r, rng)
        elif config.kind == "rr_segse":
            self.recal = SegSqueezeExcite(expanded, config.r, config.d, rng)
        elif config.kind == "rr_var1":
            self.recal = Var1SqueezeExcite(expanded, config.r, rng)
        elif config.kind == "rr_var2":
            self.recal = Var2SqueezeExcite(expanded, config.r, config.p, rng)
        else:
            self.recal = None  # recomb_only

    def forward(self, x):
        if self.config.kind == "none":
            return x
        h = self.expand(x)
        if self.recal is not None:
            h = self.recal(h)
        return self.compress(h)

    def excitation(self, x):
        """Excitation map of the inner recalibration, on the expanded width."""
        if self.config.kind in ("none", "recomb_only"):
            raise ValueError(f"block kind {self.config.kind!r} has no excitation stage")
        return self.recal.excitation(self.expand(x))


def parameter_count(module):
    """Exact number of scalar trainable parameters."""
    return int(sum(p.data.size for _, p in module.parameters()))
