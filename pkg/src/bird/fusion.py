"""Local (LTMF) and global (GTMF) temporal fusion units.

Both propagation branches own one instance of each; instances never share
parameters. The ablation stand-ins used when a unit is switched off live here
too.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import AGRD, RDCA, DeformParams, ModulatedDeformConv

MASK_INIT_LOGIT = 4.0


class FusionShapeError(ValueError):
    pass


def _check_same(*maps: Tensor) -> None:
    shapes = {tuple(m.shape) for m in maps}
    if len(shapes) != 1:
        raise FusionShapeError(f"fusion inputs disagree in shape: {sorted(shapes)}")


class LTMF(nn.Module):
    """Deformable fusion of a frame feature with its two neighbours.

    ``[a, cur, b]`` is squeezed by a 1x1 bottleneck into ``F^c``; three AGRD
    blocks and a 3x3 conv predict offsets (first ``d*2*K*K`` channels,
    linear) and masks (last ``d*K*K`` channels, sigmoid); a modulated
    deformable conv over ``F^c`` then yields the fused feature.
    """

    def __init__(
        self,
        channels: int = 64,
        groups: int = 64,
        kernel_size: int = 3,
        n_agrd: int = 3,
        growth: int = 32,
        n_layers: int = 4,
        n_rdb: int = 2,
    ):
        super().__init__()
        self.channels = channels
        self.groups = groups
        self.kernel_size = kernel_size
        kk = kernel_size * kernel_size
        self.n_offsets = groups * 2 * kk
        self.bottleneck = nn.Conv2d(3 * channels, channels, 1)
        self.agrd = nn.Sequential(
            *(AGRD(channels, growth, n_layers, n_rdb) for _ in range(n_agrd))
        )
        self.param_head = nn.Conv2d(channels, groups * 3 * kk, 3, padding=1)
        # start as a plain conv: zero offsets, masks at sigmoid(MASK_INIT_LOGIT)
        nn.init.zeros_(self.param_head.weight)
        nn.init.zeros_(self.param_head.bias)
        nn.init.constant_(self.param_head.bias[self.n_offsets :], MASK_INIT_LOGIT)
        self.deform = ModulatedDeformConv(channels, channels, kernel_size, groups)

    def predict_params(self, fc: Tensor) -> DeformParams:
        raw = self.param_head(self.agrd(fc))
        return DeformParams(
            offsets=raw[:, : self.n_offsets],
            masks=torch.sigmoid(raw[:, self.n_offsets :]),
            groups=self.groups,
            kernel_size=self.kernel_size,
        )

    def forward(self, a: Tensor, cur: Tensor, b: Tensor) -> tuple[Tensor, DeformParams]:
        _check_same(a, cur, b)
        if cur.shape[1] != self.channels:
            raise FusionShapeError(f"LTMF expects {self.channels} channels, got {cur.shape[1]}")
        fc = self.bottleneck(torch.cat([a, cur, b], dim=1))
        params = self.predict_params(fc)
        return self.deform(fc, params.offsets, params.masks), params


class ConcatFusion(nn.Module):
    """Ablation stand-in for LTMF: a single 3x3 conv over the concatenation."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(3 * channels, channels, 3, padding=1)

    def forward(self, a: Tensor, cur: Tensor, b: Tensor) -> tuple[Tensor, None]:
        _check_same(a, cur, b)
        return self.conv(torch.cat([a, cur, b], dim=1)), None


class GTMF(nn.Module):
    """Fuse the local feature with the carried propagation feature.

    conv3x3([propagated, local]) -> ReLU -> RDCA x3 -> conv3x3.
    """

    def __init__(self, channels: int = 64, n_rdca: int = 3, growth: int = 32, n_layers: int = 4):
        super().__init__()
        self.channels = channels
        self.mix = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.rdca = nn.Sequential(*(RDCA(channels, growth, n_layers) for _ in range(n_rdca)))
        self.out = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, local: Tensor, propagated: Tensor) -> Tensor:
        _check_same(local, propagated)
        if local.shape[1] != self.channels:
            raise FusionShapeError(f"GTMF expects {self.channels} channels, got {local.shape[1]}")
        m = F.relu(self.mix(torch.cat([propagated, local], dim=1)))
        return self.out(self.rdca(m))


class PassThrough(nn.Module):
    """Ablation stand-in for GTMF: the local feature becomes the state."""

    def forward(self, local: Tensor, propagated: Tensor) -> Tensor:
        _check_same(local, propagated)
        return local
