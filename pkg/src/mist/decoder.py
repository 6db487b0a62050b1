"""Convolutional attention-mixing (CAM) decoder.

A bottleneck doubles the channels of the deepest encoder feature, then four
decoder blocks climb back up the pyramid.  Each block runs

    skip fusion -> deep conv (DWC) -> conv-projected MSA -> dilated shallow
    conv (SWC) -> spatial/channel gate mixing (SSAM)

Outputs of blocks 2-4 feed 3x3 class heads whose maps are resized to the
input resolution and summed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mist.autodiff import Module, ShapeError, Tensor, const_param, normal_param, ops
from mist.encoder import FeaturePyramid
from mist.layers import Conv2d, Dropout, LayerNorm, Linear, attention


@dataclass(frozen=True)
class Ablation:
    attention_mixing: bool = True
    msa_projection: str = "conv"  # conv | linear
    swc_aggregation: str = "concat"  # concat | sum

    def __post_init__(self):
        if self.msa_projection not in ("conv", "linear"):
            raise ValueError(f"msa_projection must be conv or linear, got {self.msa_projection!r}")
        if self.swc_aggregation not in ("concat", "sum"):
            raise ValueError(f"swc_aggregation must be concat or sum, got {self.swc_aggregation!r}")


@dataclass(frozen=True)
class DecoderConfig:
    heads: Tuple[int, ...] = (10, 8, 6, 4, 2)
    dilations: Tuple[int, int] = (2, 3)
    dropout_p: float = 0.1
    n_classes: int = 2
    sa_reduction: int = 4
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if len(self.heads) != 5 or min(self.heads) < 1:
            raise ValueError(f"decoder needs five positive head counts, got {self.heads}")
        if len(self.dilations) != 2 or min(self.dilations) < 1:
            raise ValueError(f"decoder needs two positive dilations, got {self.dilations}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


class PredictionMaps(NamedTuple):
    p1: Tensor
    p2: Tensor
    p3: Tensor
    fused: Tensor

    def deep_supervision(self) -> List[Tensor]:
        return [self.p1, self.p2, self.p3]


class SkipFuse(Module):
    """Normalize, optionally upsample x2, project to the skip width, normalize, concat."""

    def __init__(self, dec_ch: int, enc_ch: int, upsample: bool, rng=None):
        self.upsample = upsample
        self.norm_in = LayerNorm(dec_ch)
        self.conv = Conv2d(dec_ch, enc_ch, 3, rng, bias=False)
        self.norm_out = LayerNorm(enc_ch)

    def forward(self, x: Tensor, enc: Tensor) -> Tensor:
        h = self.norm_in(x)
        if self.upsample:
            h = ops.bilinear_resize(h, 2 * h.shape[2], 2 * h.shape[3])
        if h.shape[2:] != enc.shape[2:]:
            raise ShapeError(f"skip fusion: decoder map {h.shape[2:]} does not match encoder map {enc.shape[2:]}")
        return ops.concat([self.norm_out(self.conv(h)), enc], axis=1)


class DeepConv(Module):
    """DWC: depthwise 3x3, ReLU, 3x3 halving the channels, ReLU, dropout."""

    def __init__(self, in_ch: int, dropout_p: float = 0.1, rng=None):
        if in_ch % 2:
            raise ShapeError(f"DWC needs an even channel count, got {in_ch}")
        self.depthwise = Conv2d(in_ch, in_ch, 3, rng, groups=in_ch)
        self.reduce = Conv2d(in_ch, in_ch // 2, 3, rng)
        self.dropout = Dropout(dropout_p)

    def forward(self, x: Tensor) -> Tensor:
        return self.dropout(self.reduce(self.depthwise(x).relu()).relu())


class FlatLinear(Module):
    """Dense affine map over the whole flattened feature map (C*h*w -> out*h*w).

    Every output pixel sees every input pixel, so the cost is (h*w)^2 times a
    1x1 projection and exceeds a 3x3 convolution once h*w > 3.
    """

    def __init__(self, in_ch: int, out_ch: int, spatial: Tuple[int, int], rng=None):
        self.spatial = tuple(spatial)
        P = spatial[0] * spatial[1]
        self.out_ch = out_ch
        self.weight = normal_param(rng, (out_ch * P, in_ch * P))
        self.bias = const_param((out_ch * P,), 0.0)

    def forward(self, x: Tensor) -> Tensor:
        N, C, H, W = x.shape
        if (H, W) != self.spatial:
            raise ShapeError(f"flattened projection built for {self.spatial}, got {(H, W)}")
        y = ops.linear(x.reshape(N, C * H * W), self.weight, self.bias)
        return y.reshape(N, self.out_ch, H, W)


class ConvMSA(Module):
    """Multi-head self-attention over pixels with convolutional q/k/v projections.

    q, k, v = LayerNorm(ReLU(proj(x))); per-head width floor(C/heads); a 1x1
    conv maps the concatenated heads back to C and the input is added.
    """

    def __init__(self, channels: int, heads: int, projection: str = "conv", spatial=None, rng=None):
        d = channels // heads if heads >= 1 else 0
        if heads < 1 or d == 0:
            raise ShapeError(f"MSA: {heads} heads leave no width for {channels} channels")
        self.heads = heads
        self.head_dim = d
        inner = heads * d
        if projection == "conv":
            make = lambda: Conv2d(channels, inner, 3, rng)
        elif projection == "linear":
            if spatial is None:
                raise ValueError("linear MSA projection needs the feature map size")
            make = lambda: FlatLinear(channels, inner, spatial, rng)
        else:
            raise ValueError(f"unknown MSA projection {projection!r}")
        self.projection = projection
        self.q = make()
        self.k = make()
        self.v = make()
        self.q_norm = LayerNorm(inner)
        self.k_norm = LayerNorm(inner)
        self.v_norm = LayerNorm(inner)
        self.out = Conv2d(inner, channels, 1, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _tokens(self, t: Tensor) -> Tensor:
        N, _, H, W = t.shape
        return t.reshape(N, self.heads, self.head_dim, H * W).permute(0, 1, 3, 2)

    def branch(self, x: Tensor) -> Tensor:
        N, _, H, W = x.shape
        q = self._tokens(self.q_norm(self.q(x).relu()))
        k = self._tokens(self.k_norm(self.k(x).relu()))
        v = self._tokens(self.v_norm(self.v(x).relu()))
        out, weights = attention(q, k, v)
        self.last_weights = weights.data
        out = out.permute(0, 1, 3, 2).reshape(N, self.heads * self.head_dim, H, W)
        return self.out(out)

    def forward(self, x: Tensor) -> Tensor:
        return self.branch(x) + x


class ShallowConv(Module):
    """SWC: two parallel dilated 3x3 convs, merged by concat or sum, conv, norm, residual."""

    def __init__(self, channels: int, dilations=(2, 3), aggregation: str = "concat", rng=None):
        if aggregation not in ("concat", "sum"):
            raise ValueError(f"unknown SWC aggregation {aggregation!r}")
        self.aggregation = aggregation
        self.branch_a = Conv2d(channels, channels, 3, rng, dilation=dilations[0])
        self.branch_b = Conv2d(channels, channels, 3, rng, dilation=dilations[1])
        merged = 2 * channels if aggregation == "concat" else channels
        self.merge = Conv2d(merged, channels, 3, rng, bias=False)
        self.norm = LayerNorm(channels)

    def branch(self, x: Tensor) -> Tensor:
        a = self.branch_a(x).relu()
        b = self.branch_b(x).relu()
        h = ops.concat([a, b], axis=1) if self.aggregation == "concat" else a + b
        return self.norm(self.merge(h))

    def forward(self, x: Tensor) -> Tensor:
        return self.branch(x) + x


class SpatialGate(Module):
    """sigmoid(conv(concat(channel-mean(conv2 x), channel-max(conv1 x)))) -> [N,1,h,w]."""

    def __init__(self, channels: int, rng=None):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.conv3 = Conv2d(2, 1, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        avg = self.conv2(x).mean(axis=1, keepdims=True)
        mx = self.conv1(x).max(axis=1, keepdims=True)
        return self.conv3(ops.concat([avg, mx], axis=1)).sigmoid()


class ChannelGate(Module):
    """sigmoid(linear(relu(linear(avgpool x)))) -> [N,C,1,1]."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        if channels % reduction:
            raise ShapeError(f"SA gate: {channels} channels not divisible by reduction {reduction}")
        self.fc1 = Linear(channels, channels // reduction, rng)
        self.fc2 = Linear(channels // reduction, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        s = ops.adaptive_avg_pool(x).reshape(N, C)
        return self.fc2(self.fc1(s).relu()).sigmoid().reshape(N, C, 1, 1)


class SSAMMix(Module):
    """SSAM(x3) = SA(x3)*x3 + SEA(x3)*x3; output SSAM(x3) + x3 (+ x2 when mixing)."""

    def __init__(self, channels: int, reduction: int = 4, mixing: bool = True, rng=None):
        self.mixing = mixing
        self.sa = ChannelGate(channels, reduction, rng)
        self.sea = SpatialGate(channels, rng)

    def ssam(self, x3: Tensor) -> Tensor:
        return self.sa(x3) * x3 + self.sea(x3) * x3

    def forward(self, x3: Tensor, x2: Tensor) -> Tensor:
        if x3.shape != x2.shape:
            raise ShapeError(f"SSAM mixing: shapes {x3.shape} and {x2.shape} differ")
        out = self.ssam(x3) + x3
        return out + x2 if self.mixing else out


class AttentionMixer(Module):
    """conv-MSA -> SWC -> SSAM mixing at constant width; shared by blocks and bottleneck."""

    def __init__(self, channels: int, heads: int, cfg: DecoderConfig, spatial, rng=None):
        ab = cfg.ablation
        self.msa = ConvMSA(channels, heads, ab.msa_projection, spatial, rng)
        self.swc = ShallowConv(channels, cfg.dilations, ab.swc_aggregation, rng)
        self.mix = SSAMMix(channels, cfg.sa_reduction, ab.attention_mixing, rng)

    def forward(self, x: Tensor) -> Tensor:
        x2 = self.msa(x)
        x3 = self.swc(x2)
        return self.mix(x3, x2)


class DecoderBlock(Module):
    def __init__(self, dec_ch: int, enc_ch: int, stage: int, cfg: DecoderConfig, spatial, rng=None):
        if stage not in (1, 2, 3, 4):
            raise ValueError(f"decoder stage must be 1..4, got {stage}")
        self.stage = stage
        self.fuse = SkipFuse(dec_ch, enc_ch, upsample=stage != 1, rng=rng)
        self.dwc = DeepConv(2 * enc_ch, cfg.dropout_p, rng)
        self.mixer = AttentionMixer(enc_ch, cfg.heads[stage], cfg, spatial, rng)

    def forward(self, x: Tensor, enc: Tensor) -> Tensor:
        return self.mixer(self.dwc(self.fuse(x, enc)))


class Bottleneck(Module):
    def __init__(self, in_ch: int, cfg: DecoderConfig, spatial, rng=None):
        self.expand = Conv2d(in_ch, 2 * in_ch, 3, rng)
        self.mixer = AttentionMixer(2 * in_ch, cfg.heads[0], cfg, spatial, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.mixer(self.expand(x))


class CAMDecoder(Module):
    def __init__(self, cfg: DecoderConfig, enc_widths: Sequence[int], image_size: int, rng=None):
        self.cfg = cfg
        self.image_size = image_size
        sides = [image_size // 2 ** (2 + i) for i in range(4)]
        c1, c2, c3, c4 = enc_widths
        self.bottleneck = Bottleneck(c4, cfg, (sides[3], sides[3]), rng)
        self.blocks = [
            DecoderBlock(2 * c4, c4, 1, cfg, (sides[3], sides[3]), rng),
            DecoderBlock(c4, c3, 2, cfg, (sides[2], sides[2]), rng),
            DecoderBlock(c3, c2, 3, cfg, (sides[1], sides[1]), rng),
            DecoderBlock(c2, c1, 4, cfg, (sides[0], sides[0]), rng),
        ]
        self.heads = [Conv2d(c, cfg.n_classes, 3, rng) for c in (c3, c2, c1)]
        self.last_block_outputs: List[Tensor] = []

    def forward(self, pyr: FeaturePyramid) -> PredictionMaps:
        skips = [pyr.x4, pyr.x3, pyr.x2, pyr.x1]
        x = self.bottleneck(pyr.x4)
        outs = []
        for block, enc in zip(self.blocks, skips):
            x = block(x, enc)
            outs.append(x)
        self.last_block_outputs = outs
        H = W = self.image_size
        maps = [ops.bilinear_resize(head(o), H, W) for head, o in zip(self.heads, outs[1:])]
        return PredictionMaps(maps[0], maps[1], maps[2], maps[0] + maps[1] + maps[2])
