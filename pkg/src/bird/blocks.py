"""Differentiable building blocks.

Bilinear sampling, modulated deformable convolution, CBAM-style channel and
spatial attention, residual dense blocks and the two composites built from
them (AGRD for offset prediction, RDCA for propagation fusion).

Every module works on batched ``(B, C, H, W)`` tensors, keeps the spatial
size, and gets its gradients from autograd. ``tests/test_gradients.py``
checks them against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ConfigurationError(ValueError):
    """Raised when tensor shapes disagree with a block's declared layout."""


@dataclass
class DeformParams:
    """Offsets and modulation masks for one deformable convolution call.

    offsets: (B, d*2*K*K, H, W) in feature-grid pixels, [group][point][dy, dx].
    masks: (B, d*K*K, H, W) in [0, 1].
    """

    offsets: Tensor
    masks: Tensor
    groups: int
    kernel_size: int

    def __post_init__(self) -> None:
        kk = self.kernel_size * self.kernel_size
        if self.offsets.dim() != 4 or self.offsets.shape[1] != self.groups * 2 * kk:
            raise ConfigurationError(
                f"offsets need {self.groups * 2 * kk} channels, got shape {tuple(self.offsets.shape)}"
            )
        if self.masks.dim() != 4 or self.masks.shape[1] != self.groups * kk:
            raise ConfigurationError(
                f"masks need {self.groups * kk} channels, got shape {tuple(self.masks.shape)}"
            )
        if self.masks.shape[2:] != self.offsets.shape[2:]:
            raise ConfigurationError("offsets and masks disagree on spatial size")
        m = self.masks.detach()
        if m.numel() and (m.min() < 0 or m.max() > 1):
            raise ConfigurationError("mask entries must lie in [0, 1]")


def _gather_bilinear(feat: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample ``feat`` at fractional positions with zero padding.

    feat: (B, G, Cg, H, W); ys, xs: (B, G, P) positions in grid coordinates
    (row, column). Returns (B, G, Cg, P).
    """
    B, G, Cg, H, W = feat.shape
    flat = feat.reshape(B, G, Cg, H * W)
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    ly = ys - y0
    lx = xs - x0
    y0 = y0.long()
    x0 = x0.long()
    out = feat.new_zeros(B, G, Cg, ys.shape[-1])
    for dy, dx, wgt in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = (yy.clamp(0, H - 1) * W + xx.clamp(0, W - 1)).unsqueeze(2)
        vals = torch.gather(flat, 3, idx.expand(B, G, Cg, idx.shape[-1]))
        out = out + vals * (wgt * valid.to(feat.dtype)).unsqueeze(2)
    return out


def bilinear_sample(feature: Tensor, x: float | Tensor, y: float | Tensor) -> Tensor:
    """Bilinearly interpolate a (C, H, W) map at column ``x``, row ``y``.

    Out-of-range corners count as zero, so anything outside
    ``[-1, W] x [-1, H]`` returns zeros. Returns a length-C vector.
    """
    if feature.dim() != 3 or feature.numel() == 0:
        raise ConfigurationError("feature must be a non-empty (C, H, W) tensor")
    c = feature.shape[0]
    ys = torch.as_tensor(y, dtype=feature.dtype).reshape(1, 1, 1)
    xs = torch.as_tensor(x, dtype=feature.dtype).reshape(1, 1, 1)
    return _gather_bilinear(feature.reshape(1, 1, c, *feature.shape[1:]), ys, xs).reshape(c)


def modulated_deform_conv(
    x: Tensor,
    weight: Tensor,
    offsets: Tensor,
    masks: Tensor,
    bias: Tensor | None = None,
    groups: int = 1,
) -> Tensor:
    """Modulated deformable convolution, stride 1, 'same' padding.

    ``offsets`` has ``groups * 2 * K*K`` channels laid out as
    ``[group][kernel point][dy, dx]``; ``masks`` has ``groups * K*K`` channels
    laid out ``[group][kernel point]``. Each deformable group owns a
    contiguous slice of ``C / groups`` input channels. Output at ``p`` is
    ``sum_k w_k * x(p + p_k + dp_k) * dm_k`` with bilinear sampling.
    """
    if x.dim() != 4:
        raise ConfigurationError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
    B, C, H, W = x.shape
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"kernel must be square and odd, got {kh}x{kw}")
    if cin != C:
        raise ConfigurationError(f"weight expects {cin} input channels, input has {C}")
    if groups < 1 or C % groups:
        raise ConfigurationError(f"{C} channels not divisible into {groups} deformable groups")
    kk = kh * kw
    if offsets.shape != (B, groups * 2 * kk, H, W):
        raise ConfigurationError(
            f"offsets shape {tuple(offsets.shape)} != {(B, groups * 2 * kk, H, W)}"
        )
    if masks.shape != (B, groups * kk, H, W):
        raise ConfigurationError(f"masks shape {tuple(masks.shape)} != {(B, groups * kk, H, W)}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"bias shape {tuple(bias.shape)} != {(cout,)}")

    pad = kh // 2
    dtype = x.dtype
    ki, kj = torch.meshgrid(
        torch.arange(kh, dtype=dtype) - pad, torch.arange(kw, dtype=dtype) - pad, indexing="ij"
    )
    gy, gx = torch.meshgrid(
        torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij"
    )
    # (kk, H, W) regular sampling grid p + p_k
    base_y = gy.unsqueeze(0) + ki.reshape(kk, 1, 1)
    base_x = gx.unsqueeze(0) + kj.reshape(kk, 1, 1)

    off = offsets.reshape(B, groups, kk, 2, H, W)
    ys = (base_y + off[:, :, :, 0]).reshape(B, groups, kk * H * W)
    xs = (base_x + off[:, :, :, 1]).reshape(B, groups, kk * H * W)

    cg = C // groups
    sampled = _gather_bilinear(x.reshape(B, groups, cg, H, W), ys, xs)
    sampled = sampled.reshape(B, groups, cg, kk, H * W)
    sampled = sampled * masks.reshape(B, groups, 1, kk, H * W)
    # columns ordered (channel, kernel point) to match weight.reshape(cout, C * kk)
    cols = sampled.reshape(B, C * kk, H * W)
    out = torch.matmul(weight.reshape(cout, C * kk), cols).reshape(B, cout, H, W)
    if bias is not None:
        out = out + bias.reshape(1, cout, 1, 1)
    return out


class ModulatedDeformConv(nn.Module):
    """Deformable convolution whose offsets and masks are supplied per call."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, groups: int = 1):
        super().__init__()
        if in_channels % groups:
            raise ConfigurationError(f"{in_channels} channels not divisible by {groups} groups")
        self.kernel_size = kernel_size
        self.groups = groups
        conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.weight = conv.weight
        self.bias = conv.bias

    def forward(self, x: Tensor, offsets: Tensor, masks: Tensor) -> Tensor:
        return modulated_deform_conv(x, self.weight, offsets, masks, self.bias, self.groups)


def attention_hidden(channels: int, reduction: int = 16, floor: int = 4) -> int:
    return max(channels // reduction, floor)


class ChannelAttention(nn.Module):
    """Scale channels by sigmoid(MLP(avgpool) + MLP(maxpool))."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = attention_hidden(channels, reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def mlp(self, v: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def scale(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale(x)[:, :, None, None]


class SpatialAttention(nn.Module):
    """Scale positions by sigmoid(conv7x7([mean_c, max_c]))."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def scale(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale(x)


def _check_channels(x: Tensor, expected: int, name: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ConfigurationError(
            f"{name} expects {expected} channels, got input of shape {tuple(x.shape)}"
        )


class DenseLayers(nn.Module):
    """``n`` densely connected 3x3 conv + ReLU layers; returns the full concat."""

    def __init__(self, channels: int, growth: int = 32, n_layers: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * growth, growth, 3, padding=1) for i in range(n_layers)
        )
        self.out_channels = channels + n_layers * growth

    def forward(self, x: Tensor) -> Tensor:
        feats = x
        for conv in self.convs:
            feats = torch.cat([feats, F.relu(conv(feats))], dim=1)
        return feats


class RDB(nn.Module):
    """Residual dense block: dense layers, 1x1 local fusion, identity skip."""

    def __init__(self, channels: int, growth: int = 32, n_layers: int = 4):
        super().__init__()
        self.channels = channels
        self.dense = DenseLayers(channels, growth, n_layers)
        self.fusion = nn.Conv2d(self.dense.out_channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "RDB")
        return x + self.fusion(self.dense(x))


class RDCA(nn.Module):
    """Residual dense block with channel attention before the local fusion.

    ``out = alpha * x + beta * fusion(CA(dense(x)))``; ``alpha`` and ``beta``
    are learnable scalars starting at 1 and 0.2.
    """

    def __init__(self, channels: int, growth: int = 32, n_layers: int = 4, reduction: int = 16):
        super().__init__()
        self.channels = channels
        self.dense = DenseLayers(channels, growth, n_layers)
        self.attention = ChannelAttention(self.dense.out_channels, reduction)
        self.fusion = nn.Conv2d(self.dense.out_channels, channels, 1)
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.beta = nn.Parameter(torch.tensor(0.2))

    def branch(self, x: Tensor) -> Tensor:
        return self.fusion(self.attention(self.dense(x)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "RDCA")
        return self.alpha * x + self.beta * self.branch(x)


class AGRD(nn.Module):
    """Attention-guided residual dense block.

    3x3 conv halving the channels, channel then spatial attention, a cascade
    of RDBs, and a 3x3 conv restoring the channel count.
    """

    def __init__(
        self,
        channels: int,
        growth: int = 32,
        n_layers: int = 4,
        n_rdb: int = 2,
        reduction: int = 16,
    ):
        super().__init__()
        if channels % 2:
            raise ConfigurationError(f"AGRD needs an even channel count, got {channels}")
        half = channels // 2
        self.channels = channels
        self.reduce = nn.Conv2d(channels, half, 3, padding=1)
        self.channel_attention = ChannelAttention(half, reduction)
        self.spatial_attention = SpatialAttention()
        self.rdbs = nn.Sequential(*(RDB(half, growth, n_layers) for _ in range(n_rdb)))
        self.restore = nn.Conv2d(half, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.channels, "AGRD")
        h = F.relu(self.reduce(x))
        h = self.spatial_attention(self.channel_attention(h))
        return self.restore(self.rdbs(h))
