"""Channel and spatial attention gates and their sequential composition.

The block rescales a feature map F twice: first per channel by a gate built
from pooled channel descriptors pushed through a shared bottleneck MLP, then
per position by a gate built from channel-pooled maps pushed through a wide
convolution. Both gates are sigmoids, so the output never exceeds the input
in magnitude and an all-zero parameter set scales the map by exactly 1/4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


@dataclass
class ChannelAttentionParams:
    """Shared two-layer bottleneck MLP; the avg and max paths reuse both weights."""

    w1: Tensor  # (C, ceil(C/ratio))
    w2: Tensor  # (ceil(C/ratio), C)
    ratio: int = 8


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # (k, k, 2, 1), k odd so same padding is symmetric
    bias: Tensor  # (1,)


@dataclass
class CbamBlock:
    channel: ChannelAttentionParams
    spatial: SpatialAttentionParams
    channels: int

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("channel.w1", self.channel.w1),
            ("channel.w2", self.channel.w2),
            ("spatial.kernel", self.spatial.kernel),
            ("spatial.bias", self.spatial.bias),
        ]


def bottleneck_width(channels: int, ratio: int) -> int:
    """ceil(C/r), floored at 1 so ratios above C degrade gracefully."""
    return max(1, -(-channels // ratio))


def init_cbam(channels: int, ratio: int = 8, kernel_size: int = 7,
              rng: np.random.Generator | None = None) -> CbamBlock:
    """Build a block bound to a channel count, with fan-in uniform init."""
    if kernel_size % 2 != 1:
        raise ValueError(f"spatial kernel size must be odd, got {kernel_size}")
    if rng is None:
        rng = np.random.default_rng(0)
    hidden = bottleneck_width(channels, ratio)

    def fan_in_uniform(shape, fan_in):
        limit = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)

    channel = ChannelAttentionParams(
        w1=fan_in_uniform((channels, hidden), channels),
        w2=fan_in_uniform((hidden, channels), hidden),
        ratio=ratio,
    )
    spatial = SpatialAttentionParams(
        kernel=fan_in_uniform((kernel_size, kernel_size, 2, 1), kernel_size * kernel_size * 2),
        bias=Tensor(np.zeros(1), requires_grad=True),
    )
    return CbamBlock(channel=channel, spatial=spatial, channels=channels)


def channel_attention(f: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0,1), shape (B,1,1,C).

    gate = sigmoid(MLP(global_avg(F)) + MLP(global_max(F))) with
    MLP(v) = relu(v @ W1) @ W2.
    """
    b, _, _, c = f.data.shape
    if params.w1.data.shape[0] != c:
        raise ShapeError(
            f"channel_attention bound to {params.w1.data.shape[0]} channels, input has {c}")

    def mlp(vec: Tensor) -> Tensor:
        return ops.affine(ops.relu(ops.affine(vec, params.w1)), params.w2)

    avg = ops.reshape(ops.pool(f, "global_avg"), (b, c))
    mx = ops.reshape(ops.pool(f, "global_max"), (b, c))
    gate = ops.sigmoid(ops.add(mlp(avg), mlp(mx)))
    return ops.reshape(gate, (b, 1, 1, c))


def spatial_attention(fp: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Per-position gate in (0,1), shape (B,H,W,1).

    gate = sigmoid(conv_same(concat(channel_avg(F'), channel_max(F'))) + bias).
    """
    stacked = ops.concat_channels([ops.pool(fp, "channel_avg"), ops.pool(fp, "channel_max")])
    return ops.sigmoid(ops.conv2d(stacked, params.kernel, params.bias, stride=1, padding="same"))


def cbam_forward(f: Tensor, block: CbamBlock) -> Tensor:
    """Channel-then-spatial gating; output shape equals input shape."""
    if f.data.shape[-1] != block.channels:
        raise ShapeError(
            f"cbam block bound to {block.channels} channels, input has {f.data.shape[-1]}")
    refined = ops.broadcast_mul(f, channel_attention(f, block.channel))
    return ops.broadcast_mul(refined, spatial_attention(refined, block.spatial))
