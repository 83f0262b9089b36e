"""Joint clip-level training and sequence-level inference/evaluation helpers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .detection import Detection
from .evaluation import MetricReport, evaluate
from .model import BIRDDetector
from .synthdata import Sequence

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = "step,L,L_D,L_STF,eta"


@dataclass
class TrainResult:
    model: BIRDDetector
    losses: list[dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]["L"]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]["L"]


def clip_windows(sequences: list[Sequence], n: int) -> list[tuple[int, int]]:
    out = []
    for s, seq in enumerate(sequences):
        if len(seq) < n:
            raise ValueError(f"sequence {seq.seq_id} has {len(seq)} frames, fewer than N_train={n}")
        out.extend((s, start) for start in range(len(seq) - n + 1))
    return out


def make_batch(sequences: list[Sequence], picks: list[tuple[int, int]], n: int):
    frames = np.stack([sequences[s].frames[t : t + n] for s, t in picks])
    gt = [[sequences[s].boxes(t + i) for i in range(n)] for s, t in picks]
    x = torch.from_numpy(frames.astype(np.float32)).unsqueeze(2)
    return x, gt


def init_model(cfg: RunConfig) -> BIRDDetector:
    """The seeded initial weights a training run starts from."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    return BIRDDetector(cfg.model_config())


def train(
    cfg: RunConfig,
    sequences: list[Sequence],
    log_path: str | Path | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Adam on the summed per-frame objective over random N_train-frame clips.

    The run is a pure function of ``cfg.seed`` and the data on a fixed
    machine: parameter init, clip order and batching all derive from it.
    """
    model = init_model(cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    dtype = next(model.parameters()).dtype
    windows = clip_windows(sequences, cfg.n_train)
    steps_per_epoch = max(1, math.ceil(len(windows) / cfg.batch_size))
    total_steps = cfg.steps if cfg.steps > 0 else cfg.epochs * steps_per_epoch
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(1,))))
    eta = cfg.effective_eta
    result = TrainResult(model)
    fh = open(log_path, "w") if log_path else None
    if fh:
        fh.write(LOSS_LOG_HEADER + "\n")
    order: list[int] = []
    try:
        for step in range(total_steps):
            picks = []
            while len(picks) < cfg.batch_size:
                if not order:
                    order = list(rng.permutation(len(windows)))
                picks.append(windows[order.pop()])
            x, gt = make_batch(sequences, picks, cfg.n_train)
            out = model(x.to(dtype))
            report = model.clip_loss(out, gt, eta=eta, lam=cfg.lam)
            opt.zero_grad()
            report.total.backward()
            opt.step()
            rec = {"step": step, **report.summary(), "eta": eta}
            result.losses.append(rec)
            if fh:
                fh.write(f"{step},{rec['L']!r},{rec['L_D']!r},{rec['L_STF']!r},{eta!r}\n")
            if progress_every and step % progress_every == 0:
                log.info("step %d L=%.4f L_D=%.4f L_STF=%.4f", step, rec["L"], rec["L_D"], rec["L_STF"])
    finally:
        if fh:
            fh.close()
    model.eval()
    return result


@torch.no_grad()
def clip_set_loss(model: BIRDDetector, sequences: list[Sequence], cfg: RunConfig) -> float:
    """Mean total loss over every N_train window of ``sequences``.

    A noise-free alternative to single-step losses for comparing weights.
    """
    windows = clip_windows(sequences, cfg.n_train)
    total = 0.0
    for w in windows:
        x, gt = make_batch(sequences, [w], cfg.n_train)
        x = x.to(next(model.parameters()).dtype)
        total += model.clip_loss(model(x), gt, eta=cfg.effective_eta, lam=cfg.lam).total.item()
    return total / len(windows)


def read_loss_log(path: str | Path) -> list[dict]:
    rows = []
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        step, l, ld, ls, eta = line.split(",")
        rows.append({"step": int(step), "L": float(l), "L_D": float(ld), "L_STF": float(ls), "eta": float(eta)})
    return rows


def predict(
    model: BIRDDetector,
    sequences: list[Sequence],
    n_infer: int = 8,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
) -> dict[tuple[str, int], list[Detection]]:
    model.eval()
    out = {}
    for seq in sequences:
        dets = model.predict_sequence(seq.frames, n_infer, score_thresh, nms_iou)
        for t, d in enumerate(dets):
            out[(seq.seq_id, t)] = d
    return out


def ground_truth(sequences: list[Sequence]) -> dict[tuple[str, int], list]:
    return {(s.seq_id, t): s.boxes(t) for s in sequences for t in range(len(s))}


def dimmed_ground_truth(sequences: list[Sequence]) -> dict[tuple[str, int], list]:
    """GT restricted to targets that are inside a dim event at that frame."""
    out = {}
    for s in sequences:
        events = s.spec.dim_events if s.spec else []
        for t in range(len(s)):
            boxes = [a.box for a in s.annotations[t] if any(e.covers(a.target_id, t) for e in events)]
            if boxes:
                out[(s.seq_id, t)] = boxes
    return out


def evaluate_model(
    model: BIRDDetector,
    sequences: list[Sequence],
    n_infer: int = 8,
    score_thresh: float = 0.05,
    eval_score_thresh: float = 0.5,
) -> MetricReport:
    preds = predict(model, sequences, n_infer, score_thresh)
    return evaluate(preds, ground_truth(sequences), eval_score_thresh)
