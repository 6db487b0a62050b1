"""Toy-scale hierarchical multi-axis attention encoder.

Stem (two 3x3 convs, the first strided) followed by four stages.  Each
stage is a stack of blocks ``MBConv -> block attention -> grid attention``;
the first MBConv of a stage halves the resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

from mist.autodiff import Module, ShapeError, Tensor, ops
from mist.layers import Conv2d, LayerNorm, Linear, attention


@dataclass(frozen=True)
class EncoderConfig:
    stem_widths: Tuple[int, int] = (4, 8)
    stage_widths: Tuple[int, int, int, int] = (8, 16, 32, 64)
    stage_depths: Tuple[int, int, int, int] = (1, 1, 1, 1)
    window: int = 2
    grid: int = 2
    mbconv_expansion: float = 4.0
    se_reduction: int = 4
    head_dim: int = 32

    @classmethod
    def full(cls) -> "EncoderConfig":
        return cls(
            stem_widths=(32, 64),
            stage_widths=(96, 192, 384, 768),
            stage_depths=(2, 2, 5, 2),
            window=8,
            grid=8,
        )

    def heads(self, width: int) -> int:
        return max(1, width // self.head_dim)

    def validate(self, image_size: int) -> None:
        if len(self.stem_widths) != 2 or len(self.stage_widths) != 4 or len(self.stage_depths) != 4:
            raise ValueError("encoder needs 2 stem widths and 4 stage widths/depths")
        base = self.stage_widths[0]
        for i, w in enumerate(self.stage_widths):
            if w != base * 2**i:
                raise ValueError(f"stage widths must double per stage, got {self.stage_widths}")
        if min(self.stem_widths) < 1 or min(self.stage_depths) < 1 or self.window < 1 or self.grid < 1:
            raise ValueError("encoder widths, depths, window and grid must be positive")
        if image_size % 32:
            raise ValueError(f"image size {image_size} is not divisible by 32")
        for i, w in enumerate(self.stage_widths):
            side = image_size // 2 ** (2 + i)
            for name, size in (("window", self.window), ("grid", self.grid)):
                if side % min(size, side):
                    raise ValueError(f"stage {i + 1} side {side} not divisible by {name} {size}")
            mid = int(round(w * self.mbconv_expansion))
            if mid % self.se_reduction:
                raise ValueError(f"expanded width {mid} not divisible by se_reduction {self.se_reduction}")
            if w % self.heads(w):
                raise ValueError(f"stage width {w} not divisible by {self.heads(w)} heads")


class FeaturePyramid(NamedTuple):
    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor


class Stem(Module):
    def __init__(self, widths: Tuple[int, int], rng=None, in_ch: int = 3):
        self.conv1 = Conv2d(in_ch, widths[0], 3, rng, stride=2, bias=False)
        self.norm = LayerNorm(widths[0])
        self.conv2 = Conv2d(widths[0], widths[1], 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        # the norm keeps small-std random init from shrinking the signal
        return self.conv2(self.norm(self.conv1(x)).relu()).relu()


class SEGate(Module):
    """Squeeze-and-excitation: pool, bottleneck MLP, sigmoid, channel rescale."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        if channels % reduction:
            raise ShapeError(f"SE gate: {channels} channels not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction, rng)
        self.fc2 = Linear(channels // reduction, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        s = ops.adaptive_avg_pool(x).reshape(N, C)
        return self.fc2(self.fc1(s).relu()).sigmoid().reshape(N, C, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class MBConv(Module):
    """Inverted residual: norm, 1x1 expand, 3x3 depthwise, SE, 1x1 project.

    Each of the two inner convolutions is followed by a channel LayerNorm.
    """

    def __init__(self, in_ch: int, out_ch: int, downsample: bool, expansion: float = 4.0, se_reduction: int = 4, rng=None):
        if not downsample and in_ch != out_ch:
            raise ShapeError("non-downsampling MBConv must keep the channel count")
        mid = int(round(out_ch * expansion))
        self.downsample = downsample
        self.norm = LayerNorm(in_ch)
        self.expand = Conv2d(in_ch, mid, 1, rng, bias=False)
        self.expand_norm = LayerNorm(mid)
        self.depthwise = Conv2d(mid, mid, 3, rng, stride=2 if downsample else 1, groups=mid, bias=False)
        self.depthwise_norm = LayerNorm(mid)
        self.se = SEGate(mid, se_reduction, rng)
        self.project = Conv2d(mid, out_ch, 1, rng)
        self.shortcut = Conv2d(in_ch, out_ch, 1, rng) if downsample else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.expand_norm(self.expand(self.norm(x))).relu()
        h = self.depthwise_norm(self.depthwise(h)).relu()
        h = self.project(self.se(h))
        if self.shortcut is None:
            return h + x
        return h + self.shortcut(ops.avg_pool2(x))


def partition(x: Tensor, mode: str, size: int) -> Tensor:
    """[N,C,H,W] -> [groups, size*size, C] token groups."""
    N, C, H, W = x.shape
    if mode == "block":
        t = x.reshape(N, C, H // size, size, W // size, size).permute(0, 2, 4, 3, 5, 1)
    elif mode == "grid":
        t = x.reshape(N, C, size, H // size, size, W // size).permute(0, 3, 5, 2, 4, 1)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return t.reshape(-1, size * size, C)


def unpartition(t: Tensor, mode: str, size: int, shape) -> Tensor:
    N, C, H, W = shape
    if mode == "block":
        x = t.reshape(N, H // size, W // size, size, size, C).permute(0, 5, 1, 3, 2, 4)
    else:
        x = t.reshape(N, H // size, W // size, size, size, C).permute(0, 5, 3, 1, 4, 2)
    return x.reshape(N, C, H, W)


class PartitionAttention(Module):
    """Pre-norm multi-head self-attention within block or grid partitions, plus FFN.

    ``size`` is the window side (block mode) or the grid side (grid mode); it
    is clamped to the feature side so deep stages of tiny inputs still work.
    """

    def __init__(self, dim: int, mode: str, size: int, heads: int, rng=None):
        if mode not in ("block", "grid"):
            raise ValueError(f"unknown partition mode {mode!r}")
        if heads < 1 or dim % heads:
            raise ShapeError(f"attention width {dim} not divisible by {heads} heads")
        self.mode = mode
        self.size = size
        self.heads = heads
        self.norm1 = LayerNorm(dim, axis=-1)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim, axis=-1)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def effective_size(self, H: int, W: int) -> int:
        s = min(self.size, H, W)
        if H % s or W % s:
            raise ShapeError(f"{self.mode} attention: {H}x{W} not divisible by partition size {s}")
        return s

    def attend(self, tokens: Tensor) -> Tensor:
        B, T, C = tokens.shape
        d = C // self.heads
        qkv = self.qkv(tokens).reshape(B, T, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        out, weights = attention(qkv[0], qkv[1], qkv[2])
        self.last_weights = weights.data
        return self.proj(out.permute(0, 2, 1, 3).reshape(B, T, C))

    def forward(self, x: Tensor) -> Tensor:
        s = self.effective_size(x.shape[2], x.shape[3])
        t = partition(x, self.mode, s)
        t = t + self.attend(self.norm1(t))
        t = t + self.fc2(self.fc1(self.norm2(t)).relu())
        return unpartition(t, self.mode, s, x.shape)


class MaxViTBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool, cfg: EncoderConfig, rng=None):
        heads = cfg.heads(out_ch)
        self.mbconv = MBConv(in_ch, out_ch, downsample, cfg.mbconv_expansion, cfg.se_reduction, rng)
        self.block_attn = PartitionAttention(out_ch, "block", cfg.window, heads, rng)
        self.grid_attn = PartitionAttention(out_ch, "grid", cfg.grid, heads, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.grid_attn(self.block_attn(self.mbconv(x)))


class Stage(Module):
    def __init__(self, in_ch: int, out_ch: int, depth: int, cfg: EncoderConfig, rng=None):
        self.blocks = [MaxViTBlock(in_ch if i == 0 else out_ch, out_ch, i == 0, cfg, rng) for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class MaxViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, image_size: int, rng=None, in_ch: int = 3):
        cfg.validate(image_size)
        self.cfg = cfg
        self.image_size = image_size
        self.stem = Stem(cfg.stem_widths, rng, in_ch)
        widths = (cfg.stem_widths[1],) + tuple(cfg.stage_widths)
        self.stages = [Stage(widths[i], widths[i + 1], cfg.stage_depths[i], cfg, rng) for i in range(4)]

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[2:] != (self.image_size, self.image_size):
            raise ShapeError(f"encoder built for {self.image_size}x{self.image_size} input, got {image.shape}")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)

    def expected_shapes(self, batch: int = 1):
        return [
            (batch, w, self.image_size // 2 ** (2 + i), self.image_size // 2 ** (2 + i))
            for i, w in enumerate(self.cfg.stage_widths)
        ]
