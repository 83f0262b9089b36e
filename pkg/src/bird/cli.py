"""Command-line entry point: ``bird synth | train | infer | eval | bench``.

A training run owns a directory with a fixed layout::

    config.txt   effective configuration (key=value)
    loss.log     per-step losses
    ckpt.bin     final weights
    preds.txt    prediction dump written by ``infer``
    metrics.txt  metric report written by ``eval``
    pr.png       precision-recall curve written by ``eval``
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .detection import PredictionFormatError, read_predictions, write_predictions
from .evaluation import benchmark, evaluate, plot_pr
from .model import BIRDDetector
from .synthdata import DatasetFormatError, SceneError, make_sequences, read_dataset, write_dataset
from .training import ground_truth, predict, train

log = logging.getLogger("bird")

CONFIG_FILE = "config.txt"
LOSS_FILE = "loss.log"
CKPT_FILE = "ckpt.bin"
PREDS_FILE = "preds.txt"
METRICS_FILE = "metrics.txt"
PR_FILE = "pr.png"


class CommandError(RuntimeError):
    pass


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return n


def _nonneg(v: str) -> int:
    n = int(v)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return n


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    kw = dict(
        length=args.len,
        height=args.size,
        width=args.size,
        n_targets=args.targets,
        noise_amp=args.noise,
        dim_span=args.dim_span,
        dim_every=args.dim_every,
    )
    try:
        seqs = make_sequences(args.seqs, args.seed, **kw)
    except SceneError as exc:
        raise CommandError(str(exc)) from exc
    try:
        write_dataset(args.out, seqs)
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {len(seqs)} sequences of {args.len} frames to {args.out}")
    return 0


# -- train ----------------------------------------------------------------------


_FLAG_OVERRIDES = {
    "no_bp": "enable_bp",
    "no_fp": "enable_fp",
    "no_ltmf": "enable_ltmf",
    "no_gtmf": "enable_gtmf",
    "no_stf": "enable_stf",
}
_VALUE_OVERRIDES = ("n_train", "n_infer", "lr", "epochs", "steps", "batch_size", "seed", "data", "run_dir")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {k: getattr(args, k) for k in _VALUE_OVERRIDES if getattr(args, k, None) is not None}
    updates.update({field: False for flag, field in _FLAG_OVERRIDES.items() if getattr(args, flag, False)})
    return cfg.replace(**updates).with_env().validate()


def _load_sequences(path: str):
    if not path:
        raise CommandError("no dataset given (use --data or set data= in the config)")
    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise CommandError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = build_config(args)
    if not cfg.run_dir:
        raise CommandError("no run directory given (use --run-dir or set run_dir= in the config)")
    seqs = _load_sequences(cfg.data)
    h, w = seqs[0].frames.shape[1:]
    cfg = cfg.replace(height=int(h), width=int(w)).validate()
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / CONFIG_FILE)
    result = train(cfg, seqs, run / LOSS_FILE, progress_every=args.progress)
    save_checkpoint(
        run / CKPT_FILE,
        result.model,
        cfg.n_train,
        extra={"height": cfg.height, "width": cfg.width, "steps": len(result.losses), "seed": cfg.seed},
    )
    print(f"trained {len(result.losses)} steps: L {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    print(f"run directory {run}")
    return 0


# -- infer ----------------------------------------------------------------------


def _run_config(run_dir: Path) -> RunConfig:
    path = run_dir / CONFIG_FILE
    return RunConfig.load(path) if path.exists() else RunConfig()


def _load_model(path: Path) -> tuple[BIRDDetector, dict]:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CommandError(f"{path}: no checkpoint") from exc
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc


def cmd_infer(args) -> int:
    run = Path(args.run_dir)
    cfg = _run_config(run)
    ckpt = Path(args.ckpt) if args.ckpt else run / CKPT_FILE
    model, header = _load_model(ckpt)
    seqs = _load_sequences(args.data or cfg.data)
    size = (header.get("extra", {}).get("height"), header.get("extra", {}).get("width"))
    for s in seqs:
        if None not in size and tuple(s.frames.shape[1:]) != size:
            raise CommandError(
                f"{ckpt}: field 'extra.height/width' is {size[0]}x{size[1]}, "
                f"but {s.seq_id} has {s.frames.shape[1]}x{s.frames.shape[2]} frames"
            )
    n = args.n_infer or cfg.n_infer
    preds = predict(model, seqs, n, cfg.score_thresh, cfg.nms_iou)
    out = Path(args.out) if args.out else run / PREDS_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, [(sid, t, dets) for (sid, t), dets in preds.items()])
    n_clips = sum(-(-len(s) // n) for s in seqs)
    print(f"{len(preds)} frames in {n_clips} clips of N_infer={n} -> {out}")
    return 0


# -- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        preds = read_predictions(args.preds)
    except (PredictionFormatError, FileNotFoundError) as exc:
        raise CommandError(str(exc)) from exc
    seqs = _load_sequences(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(preds, ground_truth(seqs), args.score_thresh)
    (out / METRICS_FILE).write_text(report.to_text())
    plot_pr(report.pr_points, out / PR_FILE)
    print(report.to_text(), end="")
    return 0


# -- bench ----------------------------------------------------------------------


def cmd_bench(args) -> int:
    modes = args.mode or ["recursive", "sliding"]
    ns = args.frames or [5]
    if len(ns) == 1:
        ns = ns * len(modes)
    if len(ns) != len(modes):
        raise CommandError("give one --frames per --mode, or a single --frames for all")
    if args.ckpt:
        model, _ = _load_model(Path(args.ckpt))
    else:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        torch.manual_seed(cfg.with_env().seed)
        model = BIRDDetector(cfg.model_config())
    rng = np.random.default_rng(0)
    frames = rng.random((args.length, args.size, args.size))
    results = [benchmark(model, frames, m, n, args.repeats) for m, n in zip(modes, ns)]
    rows = [("mode", "N", "T", "backbone", "ltmf", "gtmf", "seconds", "fps")]
    for r in results:
        rows.append((r.mode, str(r.n), str(r.frames), str(r.backbone_forwards), str(r.ltmf_calls),
                     str(r.gtmf_calls), f"{r.seconds:.3f}", f"{r.fps:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows) + "\n"
    rec = [r for r in results if r.mode == "recursive"]
    sli = [r for r in results if r.mode == "sliding"]
    if rec and sli:
        text += f"fps ratio recursive/sliding = {rec[0].fps / sli[0].fps:.2f}\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bird", description="Bidirectional-propagation small-target detector.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seqs", type=_positive, default=4)
    s.add_argument("--len", type=_positive, default=40)
    s.add_argument("--size", type=_positive, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--targets", type=_nonneg, default=1)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--dim-span", type=_nonneg, default=0)
    s.add_argument("--dim-every", type=_positive, default=8)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--steps", type=_nonneg)
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--n-train", dest="n_train", type=_positive)
    t.add_argument("--n-infer", dest="n_infer", type=_positive)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=_positive)
    t.add_argument("--seed", type=int)
    for flag in _FLAG_OVERRIDES:
        t.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true")
    t.add_argument("--progress", type=_nonneg, default=0, help="log every this many steps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a trained model over a dataset")
    i.add_argument("--run-dir", required=True)
    i.add_argument("--ckpt")
    i.add_argument("--data")
    i.add_argument("--n-infer", type=_positive)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a prediction dump against a dataset")
    e.add_argument("--preds", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="directory for metrics.txt and pr.png")
    e.add_argument("--score-thresh", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="recursive vs sliding-window throughput")
    b.add_argument("--ckpt")
    b.add_argument("--config")
    b.add_argument("--mode", action="append", choices=["recursive", "sliding"])
    b.add_argument("--frames", action="append", type=_positive, help="clip / window length N")
    b.add_argument("--length", type=_positive, default=40, help="sequence length T")
    b.add_argument("--size", type=_positive, default=64)
    b.add_argument("--repeats", type=_positive, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError) as exc:
        print(f"bird {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
