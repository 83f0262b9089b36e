"""Detection metrics and the recursive-vs-sliding throughput benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .detection import Detection, box_iou


class MetricError(ValueError):
    pass


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _as_boxes(items: Sequence) -> np.ndarray:
    rows = [d.box if isinstance(d, Detection) else tuple(d)[:4] for d in items]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def greedy_match(preds: Sequence, gts: Sequence, iou_thresh: float = 0.5) -> list[int]:
    """For score-sorted ``preds``, the matched GT index per prediction (-1 if none).

    Each prediction takes the unmatched GT of highest IoU, provided that IoU
    reaches ``iou_thresh``; equal IoUs go to the lower GT index.
    """
    pb, gb = _as_boxes(preds), _as_boxes(gts)
    result = [-1] * len(pb)
    if len(pb) == 0 or len(gb) == 0:
        return result
    iou = box_iou(pb, gb)
    taken = np.zeros(len(gb), dtype=bool)
    for i in range(len(pb)):
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))  # first maximum -> lowest index on ties
        if cand[j] >= iou_thresh:
            taken[j] = True
            result[i] = j
    return result


def match_detections(preds: Sequence, gts: Sequence, iou_thresh: float = 0.5) -> MatchCounts:
    m = greedy_match(preds, gts, iou_thresh)
    tp = sum(1 for j in m if j >= 0)
    return MatchCounts(tp, len(m) - tp, len(gts) - tp)


def prf1(counts: MatchCounts) -> tuple[float, float, float]:
    """Precision, recall and F1; 0/0 is taken as 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _score(d) -> float:
    return d.score if isinstance(d, Detection) else float(d[4])


def average_precision(
    preds: Mapping[object, Sequence],
    gts: Mapping[object, Sequence],
    iou_thresh: float = 0.5,
) -> tuple[float, list[tuple[float, float]]]:
    """All-points AP over predictions pooled across frames.

    ``preds`` and ``gts`` map a frame key to that frame's detections / GT
    boxes. Returns ``(ap, pr_points)`` with one (recall, precision) point per
    distinct score.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise MetricError("average precision is undefined without ground-truth boxes")
    scored: list[tuple[float, int]] = []  # (score, is_tp)
    for key, dets in preds.items():
        ordered = sorted(dets, key=lambda d: -_score(d))
        matches = greedy_match(ordered, gts.get(key, []), iou_thresh)
        scored.extend((_score(d), int(m >= 0)) for d, m in zip(ordered, matches))
    if not scored:
        return 0.0, []
    scores = np.array([s for s, _ in scored])
    hits = np.array([h for _, h in scored])
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1 - hits)
    # one PR point per distinct score: the last index of each tie group
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    recall = tp[last] / n_gt
    precision = tp[last] / (tp[last] + fp[last])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.r_[0.0, recall[:-1]]
    ap = float(np.sum((recall - prev_r) * envelope))
    points = [(float(r), float(p)) for r, p in zip(recall, precision)]
    return ap, points


def interpolated_envelope(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    r = np.array([p[0] for p in points])
    p = np.array([p[1] for p in points])
    env = np.maximum.accumulate(p[::-1])[::-1] if len(p) else p
    return [(float(a), float(b)) for a, b in zip(r, env)]


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    ap50: float
    counts: MatchCounts
    pr_points: list = field(default_factory=list)
    score_thresh: float = 0.5
    fps: float | None = None

    def to_text(self) -> str:
        lines = [
            f"precision={self.precision!r}",
            f"recall={self.recall!r}",
            f"f1={self.f1!r}",
            f"ap50={self.ap50!r}",
            f"tp={self.counts.tp}",
            f"fp={self.counts.fp}",
            f"fn={self.counts.fn}",
            f"score_thresh={self.score_thresh!r}",
        ]
        if self.fps is not None:
            lines.append(f"fps={self.fps!r}")
        return "\n".join(lines) + "\n"


def evaluate(
    preds: Mapping[object, Sequence],
    gts: Mapping[object, Sequence],
    score_thresh: float = 0.5,
    iou_thresh: float = 0.5,
) -> MetricReport:
    """Pr/Re/F1 at ``score_thresh`` plus AP50 over all scores."""
    counts = MatchCounts()
    for key in set(gts) | set(preds):
        kept = sorted((d for d in preds.get(key, []) if _score(d) >= score_thresh), key=lambda d: -_score(d))
        counts = counts + match_detections(kept, gts.get(key, []), iou_thresh)
    p, r, f = prf1(counts)
    ap, points = average_precision(preds, gts, iou_thresh)
    return MetricReport(p, r, f, ap, counts, points, score_thresh)


def plot_pr(points: Sequence[tuple[float, float]], path: str | Path, title: str = "PR curve") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    if points:
        r, p = zip(*points)
        ax.plot(r, p, ".-", label="raw")
        er, ep = zip(*interpolated_envelope(points))
        ax.step(er, ep, where="pre", label="envelope")
        ax.legend(loc="lower left")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- throughput ----------------------------------------------------------------


@dataclass
class BenchmarkResult:
    mode: str
    n: int
    frames: int
    seconds: float
    backbone_forwards: int
    ltmf_calls: int
    gtmf_calls: int

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else float("inf")


def sliding_windows(t_len: int, n: int) -> list[list[int]]:
    """Width-``n`` windows centred on every frame, edge indices clamped."""
    half = n // 2
    return [[min(max(t - half + j, 0), t_len - 1) for j in range(n)] for t in range(t_len)]


@torch.no_grad()
def benchmark(model, frames, mode: str = "recursive", n: int = 8, repeats: int = 1) -> BenchmarkResult:
    """Time inference over a (T, H, W) sequence.

    ``recursive`` runs ceil(T/n) clips, each frame entering the backbone once.
    ``sliding`` runs one width-``n`` clip per frame and keeps only its centre.
    """
    from .model import _as_frames

    if mode not in ("recursive", "sliding"):
        raise ValueError(f"unknown benchmark mode {mode!r}")
    model.eval()
    x = _as_frames(frames, next(model.parameters()).dtype)
    t_len = x.shape[0]
    windows = sliding_windows(t_len, n) if mode == "sliding" else None
    best = None
    for _ in range(repeats):
        model.counters.reset()
        t0 = time.perf_counter()
        if mode == "recursive":
            model.predict_sequence(x, n)
        else:
            centre = n // 2
            for idx in windows:
                model.detect(x[idx])[centre]
        elapsed = time.perf_counter() - t0
        c = model.counters
        res = BenchmarkResult(mode, n, t_len, elapsed, c.backbone, c.ltmf, c.gtmf)
        if best is None or res.seconds < best.seconds:
            best = res
    return best
