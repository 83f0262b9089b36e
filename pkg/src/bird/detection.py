"""Single-scale anchor-free detection head, decoding, assignment and losses.

Grid conventions: cell ``(ix, iy)`` is column ``ix``, row ``iy``; its centre
sits at ``((ix + 0.5) * stride, (iy + 0.5) * stride)`` in frame pixels, where
pixel ``j`` spans ``[j, j + 1)``. Regression channels are ``(dx, dy, log w,
log h)`` with offsets in cell units relative to the cell centre and sizes in
stride units.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

LAMBDA_REG = 5.0
ETA_STF = 1.0
LOG_SIZE_CLAMP = 8.0


class AssignmentError(ValueError):
    pass


class PredictionFormatError(ValueError):
    pass


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int = 0

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class HeadOutput:
    """Raw per-cell predictions. Tensors are (B, k, h, w)."""

    reg: Tensor
    obj: Tensor
    cls: Tensor
    stride: int = 8

    def __getitem__(self, b: int) -> "HeadOutput":
        return HeadOutput(self.reg[b : b + 1], self.obj[b : b + 1], self.cls[b : b + 1], self.stride)

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.obj.shape[-2:])


class DetectionHead(nn.Module):
    """Two 3x3 conv + ReLU stacks (box/objectness and class) with 1x1 predictors."""

    def __init__(self, channels: int = 64, num_classes: int = 1, stride: int = 8, prior: float = 0.01):
        super().__init__()
        self.stride = stride
        self.reg_stem = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls_stem = nn.Conv2d(channels, channels, 3, padding=1)
        self.reg_pred = nn.Conv2d(channels, 4, 1)
        self.obj_pred = nn.Conv2d(channels, 1, 1)
        self.cls_pred = nn.Conv2d(channels, num_classes, 1)
        bias = -math.log((1 - prior) / prior)
        nn.init.constant_(self.obj_pred.bias, bias)
        nn.init.constant_(self.cls_pred.bias, bias)

    def forward(self, fused: Tensor) -> HeadOutput:
        r = F.relu(self.reg_stem(fused))
        c = F.relu(self.cls_stem(fused))
        return HeadOutput(self.reg_pred(r), self.obj_pred(r), self.cls_pred(c), self.stride)


def decode_boxes(reg: Tensor, stride: int) -> Tensor:
    """(B, 4, h, w) regression -> (B, h, w, 4) boxes (x1, y1, x2, y2)."""
    _, _, h, w = reg.shape
    iy, ix = torch.meshgrid(
        torch.arange(h, dtype=reg.dtype), torch.arange(w, dtype=reg.dtype), indexing="ij"
    )
    cx = (ix + 0.5 + reg[:, 0]) * stride
    cy = (iy + 0.5 + reg[:, 1]) * stride
    bw = torch.exp(reg[:, 2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride
    bh = torch.exp(reg[:, 3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride
    return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS; returns kept indices by descending score (ties keep input order)."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        if keep and box_iou(boxes[i], boxes[keep]).max() > iou_thresh:
            continue
        keep.append(i)
    return keep


def decode(
    out: HeadOutput,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    frame_size: tuple[int, int] | None = None,
) -> list[Detection]:
    """Decode the first batch item of ``out`` into score-sorted detections.

    ``frame_size`` is (H, W) for clipping; defaults to grid size times stride.
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    h, w = out.grid
    fh, fw = frame_size or (h * out.stride, w * out.stride)
    with torch.no_grad():
        boxes = decode_boxes(out.reg[:1], out.stride)[0].reshape(-1, 4).double()
        cls_prob = torch.sigmoid(out.cls[0]).reshape(out.cls.shape[1], -1).double()
        cls_score, cls_id = cls_prob.max(dim=0)
        scores = torch.sigmoid(out.obj[0, 0]).reshape(-1).double() * cls_score
    boxes = boxes.numpy().copy()
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, fw)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, fh)
    scores = scores.numpy()
    cls_id = cls_id.numpy()
    sel = np.flatnonzero(
        (scores >= score_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    )
    if sel.size == 0:
        return []
    keep = nms(boxes[sel], scores[sel], nms_iou)
    return [
        Detection(tuple(float(v) for v in boxes[sel[k]]), float(scores[sel[k]]), int(cls_id[sel[k]]))
        for k in keep
    ]


@dataclass
class Assignment:
    """Centre-cell assignment for one frame on an (h, w) grid."""

    positive: np.ndarray  # (h, w) bool
    gt_index: np.ndarray  # (h, w) int, -1 for negatives
    targets: np.ndarray  # (h, w, 4) GT boxes at positive cells
    missed: list[int] = field(default_factory=list)

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(gt_boxes: Sequence, grid: tuple[int, int], stride: int) -> Assignment:
    """Mark the cell containing each GT centre positive; lower GT index wins ties."""
    h, w = grid
    positive = np.zeros((h, w), dtype=bool)
    gt_index = np.full((h, w), -1, dtype=np.int64)
    targets = np.zeros((h, w, 4), dtype=np.float64)
    missed = []
    fw, fh = w * stride, h * stride
    for k, box in enumerate(gt_boxes):
        x1, y1, x2, y2 = (float(v) for v in box[:4])
        if x1 < 0 or y1 < 0 or x2 > fw or y2 > fh or x1 >= x2 or y1 >= y2:
            raise AssignmentError(f"GT box {k} {box[:4]} is outside the {fw}x{fh} frame or empty")
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        ix = min(int(cx // stride), w - 1)
        iy = min(int(cy // stride), h - 1)
        if positive[iy, ix]:
            missed.append(k)
            continue
        positive[iy, ix] = True
        gt_index[iy, ix] = k
        targets[iy, ix] = (x1, y1, x2, y2)
    return Assignment(positive, gt_index, targets, missed)


def iou_aligned(a: Tensor, b: Tensor, eps: float = 1e-9) -> Tensor:
    """IoU of row-aligned (n, 4) box tensors; differentiable in both."""
    ix1 = torch.maximum(a[:, 0], b[:, 0])
    iy1 = torch.maximum(a[:, 1], b[:, 1])
    ix2 = torch.minimum(a[:, 2], b[:, 2])
    iy2 = torch.minimum(a[:, 3], b[:, 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter + eps)


@dataclass
class DetectionLosses:
    reg: Tensor
    cls: Tensor
    obj: Tensor
    total: Tensor
    missed: int = 0


def detection_loss(
    out: HeadOutput,
    gt_boxes: Sequence,
    gt_classes: Sequence[int] | None = None,
    lam: float = LAMBDA_REG,
) -> DetectionLosses:
    """Loss for the first batch item of ``out`` against one frame's GT boxes.

    reg: mean over positives of 1 - IoU(decoded, GT); cls: BCE over positives;
    obj: BCE summed over all cells, divided by max(1, #positives).
    """
    h, w = out.grid
    asg = assign_targets(gt_boxes, (h, w), out.stride)
    obj_logits = out.obj[0, 0]
    obj_target = torch.from_numpy(asg.positive).to(obj_logits.dtype)
    npos = asg.num_positive
    l_obj = F.binary_cross_entropy_with_logits(obj_logits, obj_target, reduction="sum") / max(1, npos)
    zero = obj_logits.sum() * 0.0
    if npos == 0:
        return DetectionLosses(zero, zero, l_obj, l_obj, len(asg.missed))

    pos = torch.from_numpy(asg.positive)
    pred = decode_boxes(out.reg[:1], out.stride)[0][pos]
    tgt = torch.from_numpy(asg.targets[asg.positive]).to(pred.dtype)
    l_reg = (1.0 - iou_aligned(pred, tgt)).mean()

    cls_logits = out.cls[0].permute(1, 2, 0)[pos]
    cls_target = torch.zeros_like(cls_logits)
    gt_idx = asg.gt_index[asg.positive]
    for row, k in enumerate(gt_idx):
        cid = 0 if gt_classes is None else int(gt_classes[k])
        cls_target[row, cid] = 1.0
    l_cls = F.binary_cross_entropy_with_logits(cls_logits, cls_target, reduction="sum") / npos
    total = lam * l_reg + l_cls + l_obj
    return DetectionLosses(l_reg, l_cls, l_obj, total, len(asg.missed))


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference per batch item: (B, ...) -> (B,)."""
    if a.shape != b.shape:
        raise ValueError(f"STF operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().flatten(1).mean(dim=1)


def stf_loss(
    extracted: list,
    local_backward: list,
    backward: list,
    local_forward: list,
) -> tuple[Tensor, Tensor]:
    """Per-frame spatio-temporal fusion losses, each (B, N).

    Backward term ties the backward local fusion to the extracted feature;
    forward term ties the forward local fusion to its own centre input (the
    backward state, or the extracted feature when the backward branch is off).
    ``None`` entries contribute zero.
    """
    lens = {len(extracted), len(local_backward), len(backward), len(local_forward)}
    if len(lens) != 1:
        raise ValueError("STF loss inputs must all have one entry per frame")
    b = extracted[0].shape[0]
    zero = extracted[0].new_zeros(b)
    lb, lf = [], []
    for i, e in enumerate(extracted):
        lb.append(zero if local_backward[i] is None else l1_mean(e, local_backward[i]))
        target = backward[i] if backward[i] is not None else e
        lf.append(zero if local_forward[i] is None else l1_mean(target, local_forward[i]))
    return torch.stack(lb, dim=1), torch.stack(lf, dim=1)


@dataclass
class LossReport:
    total: Tensor
    detection: Tensor  # (B, N)
    stf_backward: Tensor  # (B, N)
    stf_forward: Tensor  # (B, N)
    mask: Tensor  # (B, N) bool, True for real frames
    eta: float = ETA_STF
    lam: float = LAMBDA_REG

    @property
    def stf(self) -> Tensor:
        return self.stf_backward + self.stf_forward

    def summary(self) -> dict[str, float]:
        with torch.no_grad():
            m = self.mask.to(self.detection.dtype)
            b = self.mask.shape[0]
            return {
                "L": self.total.item(),
                "L_D": ((self.detection * m).sum() / b).item(),
                "L_STF": ((self.stf * m).sum() / b).item(),
            }


def total_loss(
    detection: Tensor,
    stf_backward: Tensor,
    stf_forward: Tensor,
    eta: float = ETA_STF,
    mask: Tensor | None = None,
) -> LossReport:
    """Sum over real frames of ``L_D + eta * L_STF``, averaged over the batch.

    All inputs are (B, N) or (N,); ``mask`` is True for non-padded frames.
    """
    if detection.dim() == 1:
        detection, stf_backward, stf_forward = (t.unsqueeze(0) for t in (detection, stf_backward, stf_forward))
    if mask is None:
        mask = torch.ones_like(detection, dtype=torch.bool)
    elif mask.dim() == 1:
        mask = mask.unsqueeze(0).expand_as(detection)
    m = mask.to(detection.dtype)
    per_frame = detection + eta * (stf_backward + stf_forward)
    total = (per_frame * m).sum() / detection.shape[0]
    return LossReport(total, detection, stf_backward, stf_forward, mask, eta)


# -- prediction dump ---------------------------------------------------------


def write_predictions(path: str | Path, records: Iterable[tuple[str, int, list[Detection]]]) -> None:
    """One JSON object per line: seq, frame, boxes=[[x1, y1, x2, y2, score], ...]."""
    with open(path, "w") as f:
        for seq_id, frame, dets in records:
            boxes = [[*d.box, d.score] for d in dets]
            f.write(json.dumps({"seq": seq_id, "frame": int(frame), "boxes": boxes}) + "\n")


def read_predictions(path: str | Path) -> dict[tuple[str, int], list[Detection]]:
    out: dict[tuple[str, int], list[Detection]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["seq"]), int(rec["frame"]))
                dets = [Detection(tuple(float(v) for v in b[:4]), float(b[4])) for b in rec["boxes"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
                raise PredictionFormatError(f"{path}:{lineno}: {exc}") from exc
            out[key] = dets
    return out
