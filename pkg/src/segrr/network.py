"""U-Net-style encoder-decoder FCN with addition skip connections.

Encoder: per scale, two (conv 3x3 -> BN -> ReLU) stages, then 2x2 max
pooling (except at the deepest scale). Decoder: a recalibration block at
the bottleneck, then per upsampling step nearest-neighbor x2, a 1x1 conv
to match channels, addition with the encoder skip, two conv-BN-ReLU
stages, a recalibration block for that scale, and spatial dropout. Head:
1x1 conv to the class count plus channel softmax.

Recalibration blocks sit at scales 1..scales with per-scale dilation
(default {3, 2, 1}) or pooling size (default {4, 2, 2}), scale 1 being
full resolution and the deepest scale hosting the bottleneck block.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import BlockConfig, RecalibrationBlock, parameter_count
from .layers import (BatchNorm2d, Conv2d, Module, SpatialDropout, max_pool2,
                     softmax_channel, upsample_nn)


@dataclass
class NetworkConfig:
    in_channels: int = 2
    num_classes: int = 4
    base_width: int = 8
    width_multiplier: int = 2
    scales: int = 3
    block: BlockConfig = field(default_factory=BlockConfig)
    per_scale_d: tuple = (3, 2, 1)
    per_scale_p: tuple = (4, 2, 2)
    width_scale: float = 1.0   # "wide baseline" knob: grows widths, no RR needed
    dropout_rate: float = 0.05

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if len(self.per_scale_d) < self.scales or len(self.per_scale_p) < self.scales:
            raise ValueError("per_scale_d/per_scale_p must cover every scale")

    def width(self, scale):
        """Channel count at a 1-based scale index."""
        w = self.base_width * self.width_multiplier ** (scale - 1)
        return max(int(round(w * self.width_scale)), 1)

    def block_for_scale(self, scale):
        return replace(self.block,
                       d=self.per_scale_d[scale - 1],
                       p=self.per_scale_p[scale - 1])

    def validate_input(self, h, w):
        down = 2 ** (self.scales - 1)
        if h % down or w % down:
            raise ValueError(f"input {h}x{w} must be divisible by 2^(scales-1)={down}")
        if self.block.kind == "rr_var2":
            for s in range(1, self.scales + 1):
                sh, sw = h // 2 ** (s - 1), w // 2 ** (s - 1)
                p = self.per_scale_p[s - 1]
                if sh % p or sw % p:
                    raise ValueError(
                        f"scale {s} feature maps {sh}x{sw} not divisible by pooling size p={p}")


class ConvStage(Module):
    """conv 3x3 -> batch norm -> ReLU."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng)
        self.norm = BatchNorm2d(cout)

    def forward(self, x):
        return self.norm(self.conv(x)).relu()


class SegmentationFCN(Module):
    def __init__(self, cfg: NetworkConfig, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        ns = cfg.scales

        for s in range(1, ns + 1):
            cin = cfg.in_channels if s == 1 else cfg.width(s - 1)
            setattr(self, f"enc{s}a", ConvStage(cin, cfg.width(s), rng))
            setattr(self, f"enc{s}b", ConvStage(cfg.width(s), cfg.width(s), rng))

        # bottleneck recalibration at the deepest scale
        setattr(self, f"rr{ns}", RecalibrationBlock(cfg.width(ns), cfg.block_for_scale(ns), rng))
        setattr(self, f"drop{ns}", SpatialDropout(cfg.dropout_rate))

        for s in range(ns - 1, 0, -1):
            setattr(self, f"adjust{s}", Conv2d(cfg.width(s + 1), cfg.width(s), 1, rng))
            setattr(self, f"dec{s}a", ConvStage(cfg.width(s), cfg.width(s), rng))
            setattr(self, f"dec{s}b", ConvStage(cfg.width(s), cfg.width(s), rng))
            setattr(self, f"rr{s}", RecalibrationBlock(cfg.width(s), cfg.block_for_scale(s), rng))
            setattr(self, f"drop{s}", SpatialDropout(cfg.dropout_rate))

        self.head = Conv2d(cfg.width(1), cfg.num_classes, 1, rng)

    def forward(self, x, rng=None):
        """Per-voxel class probabilities, shape (N, num_classes, H, W)."""
        cfg = self.cfg
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        cfg.validate_input(x.shape[2], x.shape[3])
        ns = cfg.scales

        skips = {}
        h = x
        for s in range(1, ns + 1):
            h = getattr(self, f"enc{s}b")(getattr(self, f"enc{s}a")(h))
            skips[s] = h
            if s < ns:
                h = max_pool2(h)

        h = getattr(self, f"rr{ns}")(h)
        h = getattr(self, f"drop{ns}")(h, rng=rng)

        for s in range(ns - 1, 0, -1):
            h = getattr(self, f"adjust{s}")(upsample_nn(h, 2))
            h = h + skips[s]
            h = getattr(self, f"dec{s}b")(getattr(self, f"dec{s}a")(h))
            h = getattr(self, f"rr{s}")(h)
            h = getattr(self, f"drop{s}")(h, rng=rng)

        return softmax_channel(self.head(h))


def build_network(cfg: NetworkConfig, seed=0):
    """Deterministically initialized network for a config."""
    return SegmentationFCN(cfg, np.random.default_rng(seed))


def match_wide_baseline(cfg: NetworkConfig, tolerance=0.02, max_scale=4.0):
    """Find width_scale so a kind="none" network matches cfg's parameter
    count within tolerance (the capacity-matched wide-baseline protocol).
    """
    target = parameter_count(build_network(cfg))
    base = replace(cfg, block=replace(cfg.block, kind="none"))
    lo, hi = 1.0, max_scale
    best = None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        count = parameter_count(build_network(replace(base, width_scale=mid)))
        rel = abs(count - target) / target
        if best is None or rel < best[1]:
            best = (mid, rel)
        if count < target:
            lo = mid
        else:
            hi = mid
    scale, rel = best
    if rel > tolerance:
        raise ValueError(f"could not match parameter count within {tolerance:.0%} (best {rel:.2%})")
    return replace(base, width_scale=scale)
