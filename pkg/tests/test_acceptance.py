"""The ten acceptance criteria, each at its stated tolerance.

Each test records a one-line verdict that ``conftest.py`` prints in the
terminal summary.  Criteria 6-8 train desk-scale models on CPU and take
most of the suite's runtime; they share one baseline run.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from helpers import central_difference, relative_error
from patchtokens.decoder import StructuredDecoder
from patchtokens.harness import RunConfig, _sample_rng, images_to_tensor, make_sample, train
from patchtokens.losses import bbox_loss, mask_loss, masked_logits, robust_ce, score_loss
from patchtokens.metrics import average_precision, box_iou, cumulative_iou
from patchtokens.patchgrid import build_patch_grid
from patchtokens.sequencing import ALL, parse_response
from patchtokens.tokenizer import TextTokenizer
from patchtokens.toymodel import ToyMLLM, model_config

TOK = TextTokenizer()
V = TOK.size

# Desk-scale REC recipe shared by criteria 6, 7 and 8.
REC_BASE = dict(task="REC", profile="toy", steps=5000, batch_size=32, eval_scenes=500, seed=0)
TRAIN_BUDGET_S = 30 * 60
# Ablation arms train at the benchmark budget; at 1500 steps the arms are still
# mid-learning and came out in a different order.  The n_vrt=5 arm reuses the benchmark run.
ABLATION_STEPS = REC_BASE["steps"]


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")


# ---------------------------------------------------------------------------
# 1. gradients


def test_c01_gradients_match_finite_differences():
    t0 = time.time()
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        g = torch.Generator().manual_seed(0)
        errs = {}

        def check(name, fn, x):
            x.grad = None
            fn().backward()
            errs[name] = max(errs.get(name, 0.0), relative_error(x.grad, central_difference(fn, x)))

        logits = torch.randn(6, 10, generator=g, requires_grad=True)
        targets = torch.tensor([1, 7, 8, 2, 9, 6])
        mask = (torch.rand(6, 4, generator=g) > 0.5).to(torch.uint8)
        for t, y in enumerate(targets.tolist()):
            if y >= 6:
                mask[t, y - 6] = 0
        check("robust_ce", lambda: robust_ce(logits, targets, mask, v_text=6), logits)

        lo = torch.rand(2, 2, generator=g) * 0.4
        pred = torch.cat([lo, lo + 0.2 + torch.rand(2, 2, generator=g) * 0.3], 1).requires_grad_()
        gt = torch.cat([lo + 0.05, lo + 0.35], 1)
        check("bbox_loss", lambda: bbox_loss(pred, gt), pred)

        mlog = torch.randn(2, 6, 6, generator=g, requires_grad=True)
        mgt = (torch.rand(2, 6, 6, generator=g) > 0.5).double()
        check("mask_loss", lambda: mask_loss(mlog, mgt, from_logits=True), mlog)

        s = torch.rand(2, generator=g).requires_grad_()
        s_gt = torch.rand(2, generator=g)
        check("score_loss", lambda: score_loss(s, s_gt), s)

        # full decoder on a random 2-object instance
        torch.manual_seed(0)
        dec = StructuredDecoder(8, 2, 2, heads=2, depth=3)
        hidden = [torch.randn(2, 8, requires_grad=True), torch.randn(3, 8, requires_grad=True)]
        feats = torch.randn(2, 4, 8, requires_grad=True)
        pe = torch.randn(4, 8)
        gtm = (torch.rand(2, 8, 8, generator=g) > 0.5).double()
        tgt_s = torch.tensor([0.7, 0.2])

        def full():
            out = dec(hidden, feats, pe)
            return (bbox_loss(out.boxes, gt) + mask_loss(out.mask_logits, gtm, from_logits=True)
                    + score_loss(out.scores, tgt_s))

        for i, x in enumerate([*hidden, feats, dec.task_tokens, dec.blocks[2].i2q.v.weight, dec.image_out.weight]):
            check(f"decoder[{i}]", full, x)
    finally:
        torch.set_default_dtype(prev)
    elapsed = time.time() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    record(1, ok, f"max relative error {worst:.2e} (< 1e-4) over {len(errs)} checks in {elapsed:.1f}s (< 60s)")
    assert ok, errs


# ---------------------------------------------------------------------------
# 2. masking semantics


def test_c02_masked_logits_have_zero_probability_and_gradient():
    g = torch.Generator().manual_seed(1)
    worst_prob = worst_grad = 0.0
    ce_gap = 0.0
    for trial in range(50):
        T, Vt, N = 7, 9, 6
        logits = (torch.randn(T, Vt + N, generator=g, dtype=torch.float64) * 5).requires_grad_()
        targets = torch.randint(0, Vt + N, (T,), generator=g)
        mask = (torch.rand(T, N, generator=g) > 0.4).to(torch.uint8)
        for t, y in enumerate(targets.tolist()):
            if y >= Vt:
                mask[t, y - Vt] = 0
        loss = robust_ce(logits, targets, mask, v_text=Vt)
        loss.backward()
        hidden = torch.cat([torch.zeros(T, Vt, dtype=torch.bool), mask.bool()], 1)
        probs = masked_logits(logits.detach(), mask, Vt).softmax(-1)
        worst_prob = max(worst_prob, float(probs[hidden].abs().max()) if hidden.any() else 0.0)
        worst_grad = max(worst_grad, float(logits.grad[hidden].abs().max()) if hidden.any() else 0.0)
        plain = robust_ce(logits.detach(), targets, torch.zeros(T, N, dtype=torch.uint8), v_text=Vt)
        textbook = torch.nn.functional.cross_entropy(logits.detach(), targets)
        ce_gap = max(ce_gap, abs(float(plain - textbook)))
    ok = worst_prob == 0.0 and worst_grad == 0.0 and ce_gap < 1e-9
    record(2, ok, f"masked prob max {worst_prob}, masked grad max {worst_grad}, empty-mask vs textbook CE gap {ce_gap:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. hand-computed oracles


def test_c03_hand_computed_oracles():
    from patchtokens.losses import dice_loss

    ln7 = robust_ce(torch.zeros(1, 9, dtype=torch.float64), torch.tensor([7]),
                    torch.tensor([[1, 0, 0, 1]]), v_text=5).item()
    box = bbox_loss(torch.tensor([[0.0, 0.0, 2.0, 2.0]], dtype=torch.float64) / 3,
                    torch.tensor([[1.0, 1.0, 3.0, 3.0]], dtype=torch.float64) / 3).item()
    dice = dice_loss(torch.full((1, 2, 2), 0.5, dtype=torch.float64),
                     torch.tensor([[[1.0, 1.0], [0.0, 0.0]]], dtype=torch.float64), eps=0.0).item()
    # GIoU = 1/7 - (9 - 7)/9; L1 = 4 * 1/3
    box_ref = (1 - (1 / 7 - 2 / 9)) + 4 / 3
    gaps = (abs(ln7 - math.log(7)), abs(box - box_ref), abs(dice - 0.5))
    ok = max(gaps) < 1e-6 and abs(box_ref - 2.4127) < 1e-4
    record(3, ok, f"ln7 {ln7:.7f}, box {box:.7f} (~2.4127), dice {dice:.7f}; max gap {max(gaps):.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. structural guarantee


def test_c04_generated_vrts_always_belong_to_the_paired_image():
    torch.manual_seed(0)
    model = ToyMLLM(model_config("tiny", v_text=V)).eval()
    with torch.no_grad():
        model.projector.up.mul_(200.0)  # make VRTs competitive so many are emitted
    grid = model.grid
    n_total, batch, steps = 100_000, 1000, 6
    bad = emitted_vrt = 0
    for start in range(0, n_total, batch):
        samples = [make_sample(10_000_000 + i, "REC", 5, grid, TOK, _sample_rng(4, i), "tiny")
                   for i in range(start, start + batch)]
        gens = model.generate(images_to_tensor([s.image for s in samples]),
                              [s.seq.prompt for s in samples], max_len=steps, stop_ids=(TOK.eos_id,))
        for gen in gens:
            for t in gen.ids:
                if t >= V:
                    emitted_vrt += 1
                if not 0 <= t < V + grid.n_merged:
                    bad += 1
    ok = bad == 0 and emitted_vrt > 0
    record(4, ok, f"{n_total} generations, {emitted_vrt} VRTs emitted, {bad} outside [V_text, V_text+N')")
    assert ok


# ---------------------------------------------------------------------------
# 5. template round trip


def test_c05_parse_render_round_trip():
    grid = build_patch_grid(96, 96, 8, 2)
    failures = {}
    for task in ("REC", "RES", "OVD", "RIC"):
        bad = 0
        for i in range(1000):
            s = make_sample(i, task, 5, grid, TOK, _sample_rng(5, i), "toy")
            groups = parse_response(s.seq.target, None, V, grid.n_merged)
            if [g.vrt_ids for g in groups] != s.seq.groups:
                bad += 1
        failures[task] = bad
    ok = sum(failures.values()) == 0
    record(5, ok, f"failures per task over 10^3 scenes: {failures}")
    assert ok


# ---------------------------------------------------------------------------
# 6-8. desk-scale training

_RUNS: dict = {}


def _run(**overrides):
    cfg = RunConfig(**{**REC_BASE, **overrides})
    key = json.dumps(cfg.to_dict(), sort_keys=True, default=str)
    if key not in _RUNS:
        _, report = train(cfg)
        _RUNS[key] = report
    return _RUNS[key]


@pytest.mark.slow
def test_c06_desk_scale_rec_accuracy():
    rep = _run()
    m = rep["metrics"]
    ok = m["acc50"] >= 0.90 and rep["train_seconds"] <= TRAIN_BUDGET_S and m["n"] == 500
    record(6, ok, f"REC acc@0.5 {m['acc50']:.3f} (>= 0.90) on {m['n']} held-out scenes after "
                  f"{rep['train_seconds']:.0f}s training (<= {TRAIN_BUDGET_S}s)")
    assert ok, m


@pytest.mark.slow
def test_c07_desk_scale_res_ciou():
    rep = _run()
    m = rep["metrics"]
    ok = m["ciou"] >= 0.70
    record(7, ok, f"RES cIoU {m['ciou']:.3f} (>= 0.70) from the same run")
    assert ok, m


@pytest.mark.slow
def test_c08_ablation_directions():
    acc = {}
    for n_vrt in (5, 3, 1, ALL):
        acc[f"n_vrt={n_vrt}"] = _run(steps=ABLATION_STEPS, n_vrt=n_vrt)["metrics"]["acc50"]
    acc["robust off"] = _run(steps=ABLATION_STEPS, robust_mask=False)["metrics"]["acc50"]
    acc["f_vp off"] = _run(steps=ABLATION_STEPS, use_projector=False)["metrics"]["acc50"]
    base = acc["n_vrt=5"]
    checks = {
        "5 > 1": base > acc["n_vrt=1"],
        "5 > ALL": base > acc["n_vrt=all"],
        "5 >= 3": base >= acc["n_vrt=3"],
        "3 > 1": acc["n_vrt=3"] > acc["n_vrt=1"],
        "1 >> ALL": acc["n_vrt=1"] > acc["n_vrt=all"],
        "robust on >= off": base >= acc["robust off"],
        "f_vp on >= off": base >= acc["f_vp off"],
    }
    ok = all(checks.values())
    shown = ", ".join(f"{k} {v:.3f}" for k, v in acc.items())
    failed = [k for k, v in checks.items() if not v]
    record(8, ok, f"acc@0.5 at {ABLATION_STEPS} steps: {shown}; violated: {failed or 'none'}")
    assert ok, (acc, checks)


# ---------------------------------------------------------------------------
# 9. metric oracles


def _brute_ap(dets, gts, thr, points=101):
    dets = sorted(dets, key=lambda d: -d[2])
    taken, curve, tp, fp = set(), [], 0, 0
    for img, _, _, box in dets:
        cands = [(box_iou(box, g[2]), j) for j, g in enumerate(gts) if g[0] == img and j not in taken]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            taken.add(max(cands, key=lambda c: (c[0], -c[1]))[1])
            tp += 1
        else:
            fp += 1
        curve.append((tp / len(gts), tp / (tp + fp)))
    return sum(max([p for r, p in curve if r >= k / (points - 1) - 1e-12], default=0.0)
               for k in range(points)) / points


def test_c09_metric_oracles():
    rng = np.random.default_rng(9)
    ap_mismatch = ciou_mismatch = 0
    for _ in range(300):
        def box():
            x0, x1 = sorted(rng.choice(11, 2, replace=False) / 10)
            y0, y1 = sorted(rng.choice(11, 2, replace=False) / 10)
            return (x0, y0, x1, y1)

        gts = [(int(rng.integers(2)), "c", box()) for _ in range(int(rng.integers(1, 6)))]
        scores = rng.permutation(10)[: int(rng.integers(0, 6))] / 10 + 0.05
        dets = [(int(rng.integers(2)), "c", float(s), box()) for s in scores]
        for thr in (0.5, 0.75):
            if average_precision(dets, gts, thr)["c"] != pytest.approx(_brute_ap(dets, gts, thr), abs=1e-12):
                ap_mismatch += 1
        n = int(rng.integers(1, 11))
        preds = [rng.random((5, 6)) < 0.5 for _ in range(n)]
        gtm = [rng.random((5, 6)) < 0.5 for _ in range(n)]
        inter = sum(int(np.logical_and(p, q).sum()) for p, q in zip(preds, gtm))
        union = sum(int(np.logical_or(p, q).sum()) for p, q in zip(preds, gtm))
        if cumulative_iou(preds, gtm) != (inter / union if union else 0.0):
            ciou_mismatch += 1
    ok = ap_mismatch == 0 and ciou_mismatch == 0
    record(9, ok, f"300 fixtures of <=10 objects: AP mismatches {ap_mismatch}, cIoU mismatches {ciou_mismatch}")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def test_c10_identical_config_identical_metrics(tmp_path):
    cfg = RunConfig(task="REC", profile="tiny", steps=30, batch_size=8, eval_scenes=40, seed=3)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    b = (tmp_path / "b" / "metrics.json").read_bytes()
    ok = a == b
    record(10, ok, f"two runs of the same (config, seed): metrics JSON {'identical' if ok else 'differs'} ({len(a)} bytes)")
    assert ok
