"""The full detector: propagation network plus detection head, with clip loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import DOWNSAMPLE
from .detection import (
    ETA_STF,
    LAMBDA_REG,
    Detection,
    DetectionHead,
    HeadOutput,
    LossReport,
    decode,
    detection_loss,
    stf_loss,
    total_loss,
)
from .propagation import BIRD, ClipFeatures, ModelConfig


@dataclass
class ClipOutput:
    features: ClipFeatures
    heads: list[HeadOutput]


class BIRDDetector(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.bird = BIRD(cfg)
        self.head = DetectionHead(cfg.channels, cfg.num_classes, stride=DOWNSAMPLE)

    @property
    def counters(self):
        return self.bird.counters

    def forward(self, frames: Tensor, pad_to: int | None = None) -> ClipOutput:
        feats = self.bird(frames, pad_to)
        return ClipOutput(feats, [self.head(f) for f in feats.fused])

    def clip_loss(
        self,
        out: ClipOutput,
        gt: list[list[list]],
        mask: Tensor | None = None,
        eta: float = ETA_STF,
        lam: float = LAMBDA_REG,
    ) -> LossReport:
        """``gt[b][i]`` is the list of GT boxes of frame ``i`` in clip ``b``."""
        b = len(gt)
        n = len(out.heads)
        det = torch.stack(
            [
                torch.stack([detection_loss(out.heads[i][k], gt[k][i], lam=lam).total for i in range(n)])
                for k in range(b)
            ]
        )
        f = out.features
        stf_b, stf_f = stf_loss(f.extracted, f.local_backward, f.backward, f.local_forward)
        return total_loss(det, stf_b, stf_f, eta=eta, mask=mask)

    @torch.no_grad()
    def detect(
        self,
        frames: Tensor,
        pad_to: int | None = None,
        score_thresh: float = 0.05,
        nms_iou: float = 0.5,
    ) -> list[list[Detection]]:
        """frames: (k, C, H, W) -> detections for the k real frames."""
        k = frames.shape[0]
        out = self(frames.unsqueeze(0), pad_to)
        size = tuple(frames.shape[-2:])
        return [decode(h, score_thresh, nms_iou, size) for h in out.heads[:k]]

    @torch.no_grad()
    def predict_sequence(
        self,
        frames: np.ndarray | Tensor,
        n_infer: int = 8,
        score_thresh: float = 0.05,
        nms_iou: float = 0.5,
    ) -> list[list[Detection]]:
        """Recursive inference over a (T, H, W) sequence in padded clips of ``n_infer``."""
        if n_infer < 1:
            raise ValueError("n_infer must be at least 1")
        x = _as_frames(frames, next(self.parameters()).dtype)
        out: list[list[Detection]] = []
        for start in range(0, x.shape[0], n_infer):
            out.extend(self.detect(x[start : start + n_infer], n_infer, score_thresh, nms_iou))
        return out


def _as_frames(frames: np.ndarray | Tensor, dtype: torch.dtype) -> Tensor:
    """(T, H, W) or (T, 1, H, W) array -> (T, 1, H, W) tensor."""
    x = torch.as_tensor(np.asarray(frames) if not isinstance(frames, Tensor) else frames).to(dtype)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    return x
