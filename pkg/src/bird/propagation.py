"""Clip-level orchestration of the bidirectional propagation network.

A clip of N frames is processed once: every frame goes through the backbone,
then a backward recursion (last frame to first) and a forward recursion
(first to last) over the backward states, and finally a 3x3 conv fuses
``[extracted, backward, forward]`` per frame.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import Tensor, nn

from .backbone import FeatureExtractor
from .fusion import GTMF, LTMF, ConcatFusion, PassThrough


class ClipError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyper-parameters; stored in every checkpoint header."""

    in_channels: int = 1
    backbone_width: int = 48
    channels: int = 64
    groups: int = 64
    kernel_size: int = 3
    growth: int = 32
    dense_layers: int = 4
    n_agrd: int = 3
    rdb_per_agrd: int = 2
    n_rdca: int = 3
    num_classes: int = 1
    enable_bp: bool = True
    enable_fp: bool = True
    enable_ltmf: bool = True
    enable_gtmf: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClipBatch:
    """A padded clip. ``frames`` is (N, C, H, W); ``ground_truth`` is per frame."""

    frames: Tensor
    original_length: int
    ground_truth: list | None = None

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_mask(self) -> Tensor:
        """True for real frames, False for padding."""
        mask = torch.zeros(self.length, dtype=torch.bool)
        mask[: self.original_length] = True
        return mask


def pad_clip(frames: Sequence[Tensor] | Tensor, n: int, ground_truth: list | None = None) -> ClipBatch:
    """Pad a clip to ``n`` frames by repeating its last frame."""
    if len(frames) == 0:
        raise ClipError("cannot build a clip from zero frames")
    if len(frames) > n:
        raise ClipError(f"clip has {len(frames)} frames, more than N={n}")
    stacked = torch.stack(list(frames)) if not isinstance(frames, Tensor) else frames
    k = stacked.shape[0]
    if k < n:
        stacked = torch.cat([stacked, stacked[-1:].expand(n - k, *stacked.shape[1:])], dim=0)
    gt = None
    if ground_truth is not None:
        gt = list(ground_truth) + [ground_truth[-1]] * (n - k)
    return ClipBatch(stacked, k, gt)


@dataclass
class ClipFeatures:
    """All per-frame intermediates of one pass; each list has N (B, c, h, w) maps.

    Lists for a disabled branch hold ``None``.
    """

    extracted: list
    backward: list
    local_backward: list
    forward: list
    local_forward: list
    fused: list
    params_backward: list = field(default_factory=list)
    params_forward: list = field(default_factory=list)


@dataclass
class CallCounters:
    backbone: int = 0
    ltmf: int = 0
    gtmf: int = 0

    def reset(self) -> None:
        self.backbone = self.ltmf = self.gtmf = 0


class Branch(nn.Module):
    """One propagation direction: a local fusion unit plus a global one."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.enable_ltmf:
            self.ltmf = LTMF(
                cfg.channels, cfg.groups, cfg.kernel_size, cfg.n_agrd,
                cfg.growth, cfg.dense_layers, cfg.rdb_per_agrd,
            )
        else:
            self.ltmf = ConcatFusion(cfg.channels)
        self.gtmf = GTMF(cfg.channels, cfg.n_rdca, cfg.growth, cfg.dense_layers) if cfg.enable_gtmf else PassThrough()


def _neighbours(feats: list, i: int) -> tuple[Tensor, Tensor, Tensor]:
    n = len(feats)
    return feats[max(i - 1, 0)], feats[i], feats[min(i + 1, n - 1)]


class BIRD(nn.Module):
    """Bidirectional propagation feature network (detection head excluded)."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.backbone = FeatureExtractor(cfg.in_channels, cfg.backbone_width, cfg.channels)
        self.backward_branch = Branch(cfg) if cfg.enable_bp else None
        self.forward_branch = Branch(cfg) if cfg.enable_fp else None
        self.fuse = nn.Conv2d(3 * cfg.channels, cfg.channels, 3, padding=1)
        self.counters = CallCounters()

    def extract(self, frames: Tensor) -> list[Tensor]:
        """frames: (B, N, C, H, W) -> N maps of (B, c, h, w)."""
        b, n = frames.shape[:2]
        feats = self.backbone(frames.reshape(b * n, *frames.shape[2:]))
        self.counters.backbone += b * n
        feats = feats.reshape(b, n, *feats.shape[1:])
        return list(feats.unbind(1))

    def _ltmf(self, branch: Branch, a: Tensor, cur: Tensor, b: Tensor):
        self.counters.ltmf += cur.shape[0]
        return branch.ltmf(a, cur, b)

    def _gtmf(self, branch: Branch, local: Tensor, state: Tensor) -> Tensor:
        self.counters.gtmf += local.shape[0]
        return branch.gtmf(local, state)

    def backward_pass(self, extracted: list[Tensor]) -> tuple[list, list, list]:
        """Recurse from the last frame to the first; the state entering frame N-1 is zero."""
        branch = self.backward_branch
        n = len(extracted)
        states: list = [None] * n
        local: list = [None] * n
        params: list = [None] * n
        state = torch.zeros_like(extracted[-1])
        for i in range(n - 1, -1, -1):
            prev, cur, nxt = _neighbours(extracted, i)
            local[i], params[i] = self._ltmf(branch, nxt, cur, prev)
            state = self._gtmf(branch, local[i], state)
            states[i] = state
        return states, local, params

    def forward_pass(self, backward: list[Tensor]) -> tuple[list, list, list]:
        """Recurse from the first frame to the last over the backward states."""
        branch = self.forward_branch
        n = len(backward)
        states: list = [None] * n
        local: list = [None] * n
        params: list = [None] * n
        state = torch.zeros_like(backward[0])
        for i in range(n):
            prev, cur, nxt = _neighbours(backward, i)
            local[i], params[i] = self._ltmf(branch, prev, cur, nxt)
            state = self._gtmf(branch, local[i], state)
            states[i] = state
        return states, local, params

    def forward(self, frames: Tensor, pad_to: int | None = None) -> ClipFeatures:
        """frames: (B, N, C, H, W) or (N, C, H, W).

        With ``pad_to`` the clip is padded to that length by repeating the last
        frame; the repeat happens after the backbone, which is per-frame, so
        padded frames cost no extra backbone work.
        """
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if frames.dim() != 5 or frames.shape[1] < 1:
            raise ClipError(f"expected (B, N, C, H, W) frames, got {tuple(frames.shape)}")
        extracted = self.extract(frames)
        if pad_to is not None:
            if pad_to < len(extracted):
                raise ClipError(f"clip has {len(extracted)} frames, more than N={pad_to}")
            extracted = extracted + [extracted[-1]] * (pad_to - len(extracted))
        n = len(extracted)
        zeros = torch.zeros_like(extracted[0])

        if self.backward_branch is not None:
            backward, local_b, params_b = self.backward_pass(extracted)
            fp_input = backward
        else:
            backward, local_b, params_b = [None] * n, [None] * n, [None] * n
            fp_input = extracted
        if self.forward_branch is not None:
            forward, local_f, params_f = self.forward_pass(fp_input)
        else:
            forward, local_f, params_f = [None] * n, [None] * n, [None] * n

        fused = []
        for i in range(n):
            parts = [
                extracted[i],
                backward[i] if backward[i] is not None else zeros,
                forward[i] if forward[i] is not None else zeros,
            ]
            fused.append(self.fuse(torch.cat(parts, dim=1)))
        return ClipFeatures(extracted, backward, local_b, forward, local_f, fused, params_b, params_f)


def bird_forward(model: BIRD, clip: ClipBatch) -> ClipFeatures:
    """Run ``model`` on a single padded clip (batch of one)."""
    return model(clip.frames.unsqueeze(0))
