"""Per-frame feature extraction: a three-level stride-1/stride-2 conv pyramid."""
from __future__ import annotations

import torch.nn.functional as F
from torch import Tensor, nn

DOWNSAMPLE = 8


class InputShapeError(ValueError):
    pass


def standardize(frames: Tensor, eps: float = 1e-6) -> Tensor:
    mean = frames.mean(dim=(-2, -1), keepdim=True)
    std = frames.std(dim=(-2, -1), keepdim=True)
    return (frames - mean) / (std + eps)


class FeatureExtractor(nn.Module):
    """Maps (B, 1, H, W) frames to (B, out_channels, H/8, W/8) features.

    Each of the three levels is a stride-1 3x3 conv followed by a stride-2
    3x3 conv. All convs are ``width`` wide except the last, which emits
    ``out_channels``; every conv but the last is followed by ReLU. Frames are
    first standardised to zero mean and unit variance, each on its own.
    """

    def __init__(self, in_channels: int = 1, width: int = 48, out_channels: int = 64):
        super().__init__()
        layers = []
        c = in_channels
        for level in range(3):
            layers.append(nn.Conv2d(c, width, 3, stride=1, padding=1))
            last = level == 2
            layers.append(nn.Conv2d(width, out_channels if last else width, 3, stride=2, padding=1))
            c = width
        self.convs = nn.ModuleList(layers)
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, frames: Tensor) -> Tensor:
        if frames.dim() != 4 or frames.shape[1] != self.in_channels:
            raise InputShapeError(
                f"expected (B, {self.in_channels}, H, W) frames, got {tuple(frames.shape)}"
            )
        h, w = frames.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise InputShapeError(
                f"frame size {h}x{w} must be divisible by {DOWNSAMPLE} in both dimensions"
            )
        x = standardize(frames)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.relu(x)
        return x
