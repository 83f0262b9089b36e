"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints as
``criterion N: PASS|FAIL  detail``. The training-based criteria (5, 6, 7, 10)
take tens of minutes on one CPU core.
"""
import time

import numpy as np
import pytest
import torch

from bird.blocks import (
    AGRD,
    RDB,
    RDCA,
    ChannelAttention,
    SpatialAttention,
    bilinear_sample,
    modulated_deform_conv,
)
from bird.checkpoint import load_checkpoint, save_checkpoint
from bird.config import RunConfig
from bird.evaluation import MatchCounts, average_precision, benchmark, evaluate, match_detections, prf1
from bird.model import BIRDDetector
from bird.synthdata import make_sequences, read_dataset, write_dataset
from bird.training import (
    clip_set_loss,
    dimmed_ground_truth,
    evaluate_model,
    ground_truth,
    init_model,
    predict,
    read_loss_log,
    train,
)

import oracles
from conftest import ACCEPTANCE
from fd import STEP, TOL, max_relative_error

# -- shared settings ----------------------------------------------------------------

OVERFIT_STEPS = 500
OVERFIT_SEQS = dict(n_seqs=2, base_seed=11, length=10)  # 64x64, one target each

DIM_SCENE = dict(height=32, width=32, length=16, dim_span=3, dim_every=6)
DIM_TRAIN = dict(n_seqs=64, base_seed=100)
DIM_TEST = dict(n_seqs=16, base_seed=200)
DIM_MODEL = dict(channels=32, groups=32, backbone_width=24, growth=16, n_agrd=1, n_rdca=1)
DIM_STEPS = 1000
DIM_LR = 1e-3
DIM_SEEDS = (0, 1, 2)
DIM_VARIANTS = {
    "full": {},
    "no_propagation": dict(enable_bp=False, enable_fp=False),
    "no_gtmf": dict(enable_gtmf=False),
    "no_ltmf": dict(enable_ltmf=False),
}


def record(num, ok, detail):
    ACCEPTANCE.append((num, bool(ok), detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def leaf(a):
    return torch.tensor(a, dtype=torch.float64, requires_grad=True)


def off_lattice(rng, shape, lo, hi):
    v = rng.uniform(lo, hi, shape)
    frac = v - np.floor(v)
    return np.floor(v) + 0.05 + 0.9 * frac


# -- 1: gradients ---------------------------------------------------------------------


def _perturbed(module, seed):
    module = module.double()
    torch.manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return module


def _grad_cases(seed):
    rng = np.random.default_rng(seed)
    feat = leaf(rng.standard_normal((3, 5, 6)))
    x, y = leaf(off_lattice(rng, (), -0.9, 5.9)), leaf(off_lattice(rng, (), -0.9, 4.9))
    yield "bilinear_sample", lambda: bilinear_sample(feat, x, y), {"feature": feat, "x": x, "y": y}

    inp = leaf(rng.standard_normal((1, 4, 5, 6)))
    w, b = leaf(rng.standard_normal((3, 4, 3, 3))), leaf(rng.standard_normal(3))
    off = leaf(off_lattice(rng, (1, 2 * 18, 5, 6), -1.5, 1.5))
    mask = leaf(rng.uniform(0.05, 0.95, (1, 2 * 9, 5, 6)))
    yield (
        "modulated_deform_conv",
        lambda: modulated_deform_conv(inp, w, off, mask, b, 2),
        {"input": inp, "weight": w, "bias": b, "offsets": off, "masks": mask},
    )
    torch.manual_seed(seed)
    for name, module, c, hw in [
        ("channel_attention", ChannelAttention(8), 8, 6),
        ("spatial_attention", SpatialAttention(), 4, 6),
        ("rdb", RDB(4, growth=4), 4, 5),
        ("rdca", RDCA(4, growth=4), 4, 5),
        ("agrd", AGRD(8, growth=4), 8, 6),
    ]:
        m = _perturbed(module, seed)
        xin = leaf(rng.standard_normal((1, c, hw, hw)))
        yield name, (lambda m=m, xin=xin: m(xin)), {"input": xin, **dict(m.named_parameters())}


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for seed in range(5):
        for name, fn, tensors in _grad_cases(seed):
            errs = max_relative_error(fn, tensors, STEP, limit=40, seed=seed)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    ok = all(v < TOL for v in worst.values()) and all(n >= 5 for n in counts.values()) and elapsed < 120
    detail = f"max rel err {max(worst.values()):.2e} over {len(worst)} ops x 5 instances, {elapsed:.0f}s"
    record(1, ok, detail)


# -- 2: deformable degeneracy ---------------------------------------------------------


def test_criterion_2_deformable_degeneracy():
    rng = np.random.default_rng(2)
    worst, zero_exact = 0.0, True
    for k in range(10):
        groups = [1, 2, 4][k % 3]
        x = torch.from_numpy(rng.standard_normal((2, 8, 7, 6)))
        w = torch.from_numpy(rng.standard_normal((5, 8, 3, 3)))
        b = torch.from_numpy(rng.standard_normal(5))
        off = torch.zeros(2, groups * 18, 7, 6)
        out = modulated_deform_conv(x, w, off.double(), torch.ones(2, groups * 9, 7, 6).double(), b, groups)
        worst = max(worst, (out - torch.nn.functional.conv2d(x, w, b, padding=1)).abs().max().item())
        rand_off = torch.from_numpy(rng.uniform(-2, 2, off.shape))
        zero = modulated_deform_conv(x, w, rand_off, torch.zeros(2, groups * 9, 7, 6).double(), None, groups)
        zero_exact &= bool(torch.all(zero == 0))
    record(2, worst < 1e-6 and zero_exact, f"max |deform - conv| = {worst:.1e}; zero mask exact zero: {zero_exact}")


# -- 3: oracle equivalence ------------------------------------------------------------


def _np(t):
    return t.detach().numpy()


def test_criterion_3_oracle_equivalence():
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(3)
        err = {"deform": 0.0, "channel_attention": 0.0, "spatial_attention": 0.0, "rdb": 0.0, "ap": 0.0}
        match_exact = True
        n = 20
        for k in range(n):
            groups = 1 + k % 2
            x = rng.standard_normal((1, 2, 4, 4))
            w, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)
            off = rng.uniform(-1, 1, (1, groups * 18, 4, 4))
            mask = rng.uniform(0, 1, (1, groups * 9, 4, 4))
            got = modulated_deform_conv(*(torch.from_numpy(a) for a in (x, w, off, mask, b)), groups=groups)
            ref = oracles.deform_conv(x[0], w, b, off[0], mask[0], groups)
            err["deform"] = max(err["deform"], float(np.abs(_np(got[0]) - ref).max()))

            torch.manual_seed(k)
            ca = ChannelAttention(8)
            for p in ca.parameters():
                torch.nn.init.normal_(p)
            xa = torch.randn(1, 8, 5, 5)
            ref, _ = oracles.channel_attention(_np(xa[0]), *(_np(p) for p in (ca.fc1.weight, ca.fc1.bias, ca.fc2.weight, ca.fc2.bias)))
            err["channel_attention"] = max(err["channel_attention"], float(np.abs(_np(ca(xa)[0]) - ref).max()))

            sa = SpatialAttention()
            xs = torch.randn(1, 4, 6, 6)
            ref, _ = oracles.spatial_attention(_np(xs[0]), _np(sa.conv.weight), _np(sa.conv.bias))
            err["spatial_attention"] = max(err["spatial_attention"], float(np.abs(_np(sa(xs)[0]) - ref).max()))

            rdb = RDB(4, growth=2, n_layers=2)
            xr = torch.randn(1, 4, 4, 4)
            convs = [(_np(c.weight), _np(c.bias)) for c in rdb.dense.convs]
            ref = oracles.rdb(_np(xr[0]), convs, _np(rdb.fusion.weight), _np(rdb.fusion.bias))
            err["rdb"] = max(err["rdb"], float(np.abs(_np(rdb(xr)[0]) - ref).max()))

            frames = []
            for _ in range(3):
                gts = [tuple(np.r_[xy, xy + rng.uniform(4, 10, 2)]) for xy in rng.uniform(0, 40, (rng.integers(1, 4), 2))]
                preds = []
                for _ in range(rng.integers(1, 6)):
                    g = gts[rng.integers(len(gts))]
                    j = rng.uniform(-3, 3, 4) if rng.random() < 0.7 else rng.uniform(20, 30, 4)
                    preds.append((g[0] + j[0], g[1] + j[1], g[2] + j[2] + 6, g[3] + j[3] + 6, float(rng.integers(1, 10)) / 10))
                preds.sort(key=lambda p: -p[4])
                frames.append((preds, gts))
                c = match_detections(preds, gts)
                match_exact &= (c.tp, c.fp, c.fn) == oracles.greedy_match(preds, gts, 0.5)
            n_gt = sum(len(g) for _, g in frames)
            ap, _ = average_precision({i: p for i, (p, _) in enumerate(frames)}, {i: g for i, (_, g) in enumerate(frames)})
            ref_ap, _ = oracles.ap_by_threshold_sweep(frames, n_gt)
            err["ap"] = max(err["ap"], abs(ap - ref_ap))
    finally:
        torch.set_default_dtype(torch.float32)
    ok = match_exact and all(v < 1e-10 for v in err.values())
    detail = f"{n} instances each; matching exact: {match_exact}; max errors " + ", ".join(f"{k} {v:.1e}" for k, v in err.items())
    record(3, ok, detail)


# -- 4: metric exactness --------------------------------------------------------------


def test_criterion_4_metrics_exactness():
    p = prf1(MatchCounts(8, 2, 2))
    A, B = (10, 10, 20, 20), (50, 50, 60, 60)
    preds = [(11, 11, 21, 21, 0.9), (100, 100, 110, 110, 0.8), (50, 50, 60, 60, 0.7)]
    counts = match_detections(preds, [A, B])
    ap, _ = average_precision({0: [(*A, 0.9), (100, 100, 110, 110, 0.8), (*B, 0.7)]}, {0: [A, B]})
    ok = p == (0.8, 0.8, 0.8) or np.allclose(p, 0.8, atol=1e-15)
    ok = ok and counts == MatchCounts(2, 1, 0) and abs(ap - 5 / 6) <= 1e-12
    record(4, ok, f"prf1(8,2,2)={tuple(round(v, 15) for v in p)}; match TP/FP/FN={counts.tp}/{counts.fp}/{counts.fn}; AP={ap!r}")


# -- 5 and 10: overfit run ----------------------------------------------------------------


@pytest.fixture(scope="module")
def overfit():
    seqs = make_sequences(OVERFIT_SEQS["n_seqs"], OVERFIT_SEQS["base_seed"], length=OVERFIT_SEQS["length"])
    cfg = RunConfig(steps=OVERFIT_STEPS, seed=0)
    initial = clip_set_loss(init_model(cfg), seqs, cfg)
    t0 = time.perf_counter()
    result = train(cfg, seqs)
    elapsed = time.perf_counter() - t0
    final = clip_set_loss(result.model, seqs, cfg)
    return dict(seqs=seqs, cfg=cfg, result=result, initial=initial, final=final, seconds=elapsed)


def test_criterion_5_overfit(overfit):
    ratio = overfit["final"] / overfit["initial"]
    report = evaluate_model(overfit["result"].model, overfit["seqs"], n_infer=8)
    minutes = overfit["seconds"] / 60
    ok = ratio <= 0.10 and report.ap50 >= 0.90 and minutes <= 30
    res = overfit["result"]
    detail = (
        f"{OVERFIT_STEPS} steps in {minutes:.1f} min; clip-set loss {overfit['initial']:.2f} -> {overfit['final']:.2f} "
        f"(ratio {ratio:.3f}; last logged step {res.initial_loss:.2f} -> {res.final_loss:.2f}); AP50 {report.ap50:.3f}"
    )
    record(5, ok, detail)


def test_criterion_10_inference_length(overfit):
    aps = {}
    for n in (4, 8, 12):
        aps[n] = evaluate_model(overfit["result"].model, overfit["seqs"], n_infer=n).ap50
    spread = max(aps.values()) - min(aps.values())
    record(10, spread < 0.05, "AP50 by N_infer " + ", ".join(f"{n}: {v:.3f}" for n, v in aps.items()) + f"; spread {spread:.3f}")


# -- 6 and 7: dim-event benchmark ------------------------------------------------------


@pytest.fixture(scope="module")
def dim_runs():
    train_seqs = make_sequences(DIM_TRAIN["n_seqs"], DIM_TRAIN["base_seed"], **DIM_SCENE)
    test_seqs = make_sequences(DIM_TEST["n_seqs"], DIM_TEST["base_seed"], **DIM_SCENE)
    gt, dim_gt = ground_truth(test_seqs), dimmed_ground_truth(test_seqs)
    runs = {}
    for seed in DIM_SEEDS:
        for name, flags in DIM_VARIANTS.items():
            cfg = RunConfig(
                steps=DIM_STEPS, seed=seed, lr=DIM_LR, height=DIM_SCENE["height"], width=DIM_SCENE["width"],
                **DIM_MODEL, **flags,
            )
            model = train(cfg, train_seqs).model
            preds = predict(model, test_seqs, n_infer=cfg.n_infer)
            runs[name, seed] = dict(
                model=model,
                dim_recall=evaluate(preds, dim_gt).recall,
                ap50=evaluate(preds, gt).ap50,
            )
    return dict(runs=runs, test=test_seqs)


def _mean(runs, name, key):
    return float(np.mean([runs[name, s][key] for s in DIM_SEEDS]))


def test_criterion_6_global_information(dim_runs):
    runs = dim_runs["runs"]
    full, ablated = _mean(runs, "full", "dim_recall"), _mean(runs, "no_propagation", "dim_recall")
    model = runs["full", DIM_SEEDS[0]]["model"].double()
    seq = dim_runs["test"][0]
    x = torch.from_numpy(seq.frames[:8]).unsqueeze(1).unsqueeze(0).requires_grad_(True)
    (grad,) = torch.autograd.grad(model.bird(x).fused[0].sum(), x)
    # central difference on the most sensitive pixel of the last frame
    idx = int(torch.argmax(grad[0, -1].abs()))
    vals = []
    with torch.no_grad():
        for step in (1e-4, -1e-4):
            y = x.detach().clone()
            y[0, -1].view(-1)[idx] += step
            vals.append(model.bird(y).fused[0].sum().item())
    probe = abs(vals[0] - vals[1]) / 2e-4
    model.float()
    ok = full - ablated >= 0.15 and probe > 1e-12
    per_seed = ", ".join(f"{runs['full', s]['dim_recall']:.2f}/{runs['no_propagation', s]['dim_recall']:.2f}" for s in DIM_SEEDS)
    detail = (
        f"dimmed-frame recall full {full:.3f} vs no-propagation {ablated:.3f} (gap {full - ablated:.3f}; per seed {per_seed}); "
        f"|dF^D_0/dI_7| probe {probe:.2e}"
    )
    record(6, ok, detail)


def test_criterion_7_ablation_monotonicity(dim_runs):
    runs = dim_runs["runs"]
    full, no_g, no_l = (_mean(runs, n, "ap50") for n in ("full", "no_gtmf", "no_ltmf"))
    ok = full >= no_g - 0.01 and full >= no_l - 0.01
    per_seed = ", ".join(
        "/".join(f"{runs[n, s]['ap50']:.2f}" for n in ("full", "no_gtmf", "no_ltmf")) for s in DIM_SEEDS
    )
    record(7, ok, f"mean AP50 full {full:.3f}, no-GTMF {no_g:.3f}, no-LTMF {no_l:.3f} (per seed full/no-GTMF/no-LTMF {per_seed})")


# -- 8: throughput ------------------------------------------------------------------------


def test_criterion_8_single_visit_throughput():
    torch.manual_seed(0)
    model = BIRDDetector(RunConfig().model_config())
    frames = np.random.default_rng(8).random((40, 64, 64))
    benchmark(model, frames[:5], "recursive", 5)  # warm-up
    rec = benchmark(model, frames, "recursive", 5, repeats=2)
    sli = benchmark(model, frames, "sliding", 5, repeats=2)
    ratio = rec.fps / sli.fps
    ok = rec.backbone_forwards == 40 and sli.backbone_forwards == 200 and ratio >= 2.0
    detail = (
        f"backbone forwards recursive {rec.backbone_forwards}, sliding {sli.backbone_forwards}; "
        f"fps {rec.fps:.1f} vs {sli.fps:.1f} (ratio {ratio:.2f})"
    )
    record(8, ok, detail)


# -- 9: determinism and persistence ---------------------------------------------------


def test_criterion_9_determinism_and_persistence(tmp_path):
    seqs = make_sequences(2, 9, length=8, height=32, width=32)
    cfg = RunConfig(steps=6, seed=3, height=32, width=32, **DIM_MODEL)
    train(cfg, seqs, tmp_path / "a.log")
    result = train(cfg, seqs, tmp_path / "b.log")
    logs_equal = (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    logs_equal &= len(read_loss_log(tmp_path / "a.log")) == 6

    save_checkpoint(tmp_path / "ckpt.bin", result.model, cfg.n_train)
    loaded, _ = load_checkpoint(tmp_path / "ckpt.bin")
    a = predict(result.model, seqs, 4, score_thresh=0.0)
    b = predict(loaded, seqs, 4, score_thresh=0.0)
    preds_equal = a == b and sum(len(v) for v in a.values()) > 0

    write_dataset(tmp_path / "data", seqs)
    data_equal = read_dataset(tmp_path / "data") == seqs
    ok = logs_equal and preds_equal and data_equal
    record(9, ok, f"loss logs bit-identical: {logs_equal}; checkpoint predictions identical: {preds_equal}; dataset round-trip: {data_equal}")
