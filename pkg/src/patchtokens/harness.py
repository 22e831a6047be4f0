"""Training, evaluation and ablation runs on synthetic scenes."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_scene, scene_profile
from .errors import NumericError, TaskError
from .losses import bbox_loss, canonical_boxes, mask_loss, pairwise_iou, robust_ce, score_loss, total_loss
from .patchgrid import foreground_vrts
from .sequencing import ALL, parse_response, render_template, sample_vrts, build_foreground_mask
from .tokenizer import KINDS, TextTokenizer
from .toymodel import ToyMLLM, model_config, seed_everything

log = logging.getLogger(__name__)

TRAIN_TASKS = ("REC", "RES", "OVD", "RIC", "PRO")
EVAL_SEED_BASE = 1_000_000_000
MASK_MODES = ("foreground", "selected")


def output_root() -> Path:
    return Path(os.environ.get("PATCHTOKENS_OUTPUT", "runs"))


@dataclass
class RunConfig:
    task: str = "REC"
    profile: str = "toy"
    n_vrt: int | str = 5
    robust_mask: bool = True
    mask_mode: str = "foreground"  # or "selected": hide every VRT outside the sampled set
    use_projector: bool = True
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3  # toy-scale; the full-size recipe uses 2e-5
    weight_decay: float = 0.01
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    eval_scenes: int = 500
    eval_every: int = 0
    max_new_tokens: int = 48
    # CE is a mean over ~30 supervised steps of which one or two pick the
    # object; without up-weighting, the decoder losses dominate the trunk.
    # The doubled mask term buys cIoU on the 96 px toy images.
    loss_weights: dict = field(default_factory=lambda: {"ce": 10.0, "mask": 2.0})
    model: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self) -> None:
        self.task = self.task.upper()
        if self.task not in TRAIN_TASKS:
            raise TaskError(f"unknown task {self.task!r}; expected one of {TRAIN_TASKS}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if isinstance(self.n_vrt, str):
            if self.n_vrt.lower() != ALL:
                self.n_vrt = int(self.n_vrt)
            else:
                self.n_vrt = ALL

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


def build_model(cfg: RunConfig, tokenizer: TextTokenizer) -> ToyMLLM:
    mc = model_config(cfg.profile, v_text=tokenizer.size, use_projector=cfg.use_projector, **cfg.model)
    return ToyMLLM(mc)


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    image: np.ndarray
    annotation: object
    seq: object  # VrtSequence
    task: str


def _sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def object_foreground(grid, ann, i: int) -> list[int]:
    obj = ann.objects[i]
    if obj.mask is not None and obj.mask.any():
        return foreground_vrts(grid, mask=obj.mask)
    return foreground_vrts(grid, box=ann.pixel_box(i))


def make_sample(
    scene_seed: int, task: str, n_vrt, grid, tokenizer: TextTokenizer, rng: np.random.Generator, profile
) -> Sample:
    image, ann = generate_scene(scene_seed, profile)
    if task == "PRO":
        task = ("REC", "OVD", "RIC")[int(rng.integers(3))]
    n_visual = grid.n_merged
    if task in ("REC", "RES"):
        referred = int(rng.integers(len(ann.objects)))
        sampled = [None] * len(ann.objects)
        sampled[referred] = sample_vrts(object_foreground(grid, ann, referred), n_vrt, rng)
        seq = render_template(task, ann, sampled, tokenizer, n_visual, referred=referred)
    else:
        sampled = [sample_vrts(object_foreground(grid, ann, i), n_vrt, rng) for i in range(len(ann.objects))]
        cats = None
        if task == "OVD":
            cats = list(dict.fromkeys(o.category for o in ann.objects))
            absent = [k for k in KINDS if k not in cats]
            if absent and rng.random() < 0.3:
                cats.insert(int(rng.integers(len(cats) + 1)), absent[int(rng.integers(len(absent)))])
        seq = render_template(task, ann, sampled, tokenizer, n_visual, categories=cats)
    return Sample(image, ann, seq, task)


def mask_grid_target(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average a pixel mask onto an (out_h, out_w) grid, threshold at 0.5."""
    h, w = mask.shape
    m = mask.reshape(out_h, h // out_h, out_w, w // out_w).mean(axis=(1, 3))
    return m >= 0.5


def images_to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@dataclass
class Batch:
    images: torch.Tensor
    inputs: torch.Tensor  # (B, L-1)
    labels: torch.Tensor  # (B, L-1)
    valid: torch.Tensor  # (B, L-1) supervised steps
    mask: torch.Tensor  # (B, L-1, N')
    group_pos: list[list[list[int]]]  # per sample, per group: input positions of its hidden rows
    group_box: list[list[tuple]]
    group_mask: list[list[np.ndarray | None]]
    samples: list[Sample]


def step_foregrounds(sample: Sample, grid) -> list[list[int]]:
    """Full foreground of the object active at each target step (empty for text)."""
    cache: dict[int, list[int]] = {}
    out = []
    for o in sample.seq.step_object:
        if o < 0:
            out.append([])
            continue
        if o not in cache:
            cache[o] = object_foreground(grid, sample.annotation, o)
        out.append(cache[o])
    return out


def collate(
    samples: list[Sample],
    tokenizer: TextTokenizer,
    n_visual: int,
    mask_hw: tuple[int, int],
    grid=None,
    mask_mode: str = "foreground",
) -> Batch:
    """Pad a batch for teacher forcing.

    ``grid`` is needed for ``mask_mode="foreground"``; without it the
    "selected" semantics are used.
    """
    L = max(len(s.seq.ids) for s in samples)
    B = len(samples)
    ids = torch.full((B, L), tokenizer.pad_id, dtype=torch.long)
    valid = torch.zeros(B, L - 1, dtype=torch.bool)
    mask = torch.zeros(B, L - 1, n_visual, dtype=torch.uint8)
    group_pos, group_box, group_mask = [], [], []
    v_text = tokenizer.size
    for b, s in enumerate(samples):
        seq = s.seq
        n = len(seq.ids)
        ids[b, :n] = torch.tensor(seq.ids)
        p = seq.prompt_len
        valid[b, p - 1 : n - 1] = True
        fg = step_foregrounds(s, grid) if mask_mode == "foreground" and grid is not None else None
        m = build_foreground_mask(seq.target, seq.step_selected(), v_text, n_visual, fg)
        mask[b, p - 1 : n - 1] = torch.from_numpy(m)
        pos, boxes, masks = [], [], []
        j = 0
        step_obj = seq.step_object
        while j < len(step_obj):
            if step_obj[j] >= 0:
                k = j
                while k < len(step_obj) and step_obj[k] == step_obj[j]:
                    k += 1
                obj = s.annotation.objects[step_obj[j]]
                pos.append(list(range(p - 1 + j, p - 1 + k)))
                boxes.append(obj.box)
                masks.append(None if obj.mask is None else mask_grid_target(obj.mask, *mask_hw))
                j = k
            else:
                j += 1
        group_pos.append(pos)
        group_box.append(boxes)
        group_mask.append(masks)
    return Batch(
        images=images_to_tensor([s.image for s in samples]),
        inputs=ids[:, :-1],
        labels=ids[:, 1:],
        valid=valid,
        mask=mask,
        group_pos=group_pos,
        group_box=group_box,
        group_mask=group_mask,
        samples=samples,
    )


def compute_losses(model: ToyMLLM, batch: Batch, cfg: RunConfig, diagnostics: dict | None = None):
    feats = model.encode_image(batch.images)
    vocab = model.build_vocab(feats)
    hidden, logits = model(feats, batch.inputs, vocab)
    ce = robust_ce(
        logits, batch.labels, batch.mask if cfg.robust_mask else None, model.v_text, valid=batch.valid
    )
    hs, img_idx, gt_boxes, gt_masks, has_mask = [], [], [], [], []
    for b, positions in enumerate(batch.group_pos):
        for g, pos in enumerate(positions):
            hs.append(hidden[b, pos])
            img_idx.append(b)
            gt_boxes.append(batch.group_box[b][g])
            gm = batch.group_mask[b][g]
            has_mask.append(gm is not None)
            gt_masks.append(gm if gm is not None else np.zeros(model.decoder.rows * model.decoder.upsample, dtype=bool))
    if not hs:
        return total_loss(ce, weights=cfg.loss_weights)
    out = model.decoder(hs, feats[img_idx], model.merged_pos)
    gt_b = torch.tensor(gt_boxes, dtype=out.boxes.dtype)
    lb = bbox_loss(out.boxes, gt_b, diagnostics)
    sel = torch.tensor(has_mask)
    lm = None
    if bool(sel.any()):
        gm = torch.from_numpy(np.stack([m for m, h in zip(gt_masks, has_mask) if h])).float()
        lm = mask_loss(out.mask_logits[sel], gm, from_logits=True)
    with torch.no_grad():
        s_gt = pairwise_iou(canonical_boxes(out.boxes), gt_b)
    ls = score_loss(out.scores, s_gt)
    return total_loss(ce, lb, lm, ls, weights=cfg.loss_weights)


def cosine_lr(step: int, cfg: RunConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    t = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * min(t, 1.0))))


def train(cfg: RunConfig, out_dir=None, progress: bool = False):
    """Optimise the summed objective with teacher forcing.

    Returns ``(model, report)``; writes ``checkpoint.npz``, ``config.json``
    and ``metrics.json`` into ``out_dir`` when given.
    """
    torch.set_num_threads(max(1, torch.get_num_threads()))
    seed_everything(cfg.seed)
    tok = TextTokenizer()
    model = build_model(cfg, tok)
    model.train()
    grid = model.grid
    prof = cfg.profile
    if scene_profile(prof).image_size != grid.image_h:
        raise ValueError(f"scene profile {prof} does not match model image size {grid.image_h}")
    mask_hw = (grid.rows_merged * model.cfg.mask_upsample, grid.cols_merged * model.cfg.mask_upsample)
    decay, no_decay = [], []
    for n, p in model.named_parameters():
        (decay if p.dim() >= 2 and "pos" not in n and "table" not in n else no_decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, betas=(0.9, 0.98),
    )
    history: list[dict] = []
    t0 = time.time()
    for step in range(cfg.steps):
        for gr in opt.param_groups:
            gr["lr"] = cosine_lr(step, cfg)
        samples = []
        for i in range(cfg.batch_size):
            rng = _sample_rng(cfg.seed, step, i)
            scene_seed = int(rng.integers(0, EVAL_SEED_BASE))
            samples.append(make_sample(scene_seed, cfg.task, cfg.n_vrt, grid, tok, rng, prof))
        batch = collate(samples, tok, grid.n_merged, mask_hw, grid, cfg.mask_mode)
        diag: dict = {}
        parts = compute_losses(model, batch, cfg, diag)
        if not torch.isfinite(parts.total):
            dump = {"step": step, "losses": parts.as_floats(), "texts": [tok.decode(s.seq.ids, grid.n_merged) for s in samples]}
            if out_dir:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "nan_batch.json").write_text(json.dumps(dump, indent=1))
            raise NumericError(f"non-finite loss at step {step}: {parts.as_floats()}")
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        rec = {"step": step, **parts.as_floats()}
        history.append(rec)
        if progress and (step % 50 == 0 or step == cfg.steps - 1):
            log.info("step %d  %s  (%.0fs)", step, {k: round(v, 4) for k, v in parts.as_floats().items()}, time.time() - t0)
    model.eval()
    report = {"config": cfg.to_dict(), "train_seconds": round(time.time() - t0, 1), "loss_curve": history}
    if cfg.eval_scenes:
        report["metrics"] = evaluate(model, cfg, n_scenes=cfg.eval_scenes)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.npz", model, cfg.to_dict())
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        (out / "metrics.json").write_text(json.dumps(report.get("metrics", {}), indent=2, sort_keys=True))
        (out / "loss_curve.json").write_text(json.dumps(history))
        plot_loss_curve(history, out / "loss_curve.png")
    return model, report


def plot_loss_curve(history: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [h["step"] for h in history]
    for k in ("total", "ce", "bbox", "mask", "score"):
        ax.plot(steps, [h[k] for h in history], label=k, lw=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# evaluation

_CAT_RE = re.compile(r'"([^"]+)"')


def group_categories(ids, groups, tok: TextTokenizer, n_visual: int) -> list[str | None]:
    """Category of each OVD group: the last quoted word before the group."""
    cats = []
    for g in groups:
        prefix = tok.decode(ids[: g.span[0]], n_visual)
        found = _CAT_RE.findall(prefix)
        cats.append(found[-1] if found else None)
    return cats


def eval_task(task: str) -> str:
    if task == "PRO":
        return "REC"
    return "REC" if task == "RES" else task


def evaluate(model: ToyMLLM, cfg: RunConfig, n_scenes: int | None = None, task: str | None = None, batch: int = 100) -> dict:
    """Greedy-decode held-out scenes and score them.

    REC/RES: acc@0.5, acc@0.75 on the first group's box, cIoU of its mask,
    and the fraction of samples whose emitted VRTs all lie on the target.
    OVD: AP@50 and AP@[50:95] per category.  RIC: greedy precision/recall.
    """
    task = eval_task((task or cfg.task).upper())
    if (cfg.task in ("REC", "RES") and task not in ("REC",)) or (cfg.task in ("OVD", "RIC") and task != cfg.task):
        raise TaskError(f"checkpoint trained for {cfg.task} cannot be evaluated on {task}")
    n_scenes = n_scenes or cfg.eval_scenes
    tok = TextTokenizer()
    grid = model.grid
    model.eval()
    ious, inter_union, on_target, n_groups = [], [], [], []
    pred_masks, gt_masks = [], []
    dets, gts = [], []
    ric_tp = ric_pred = ric_gt = 0
    invalid_ids = 0
    for start in range(0, n_scenes, batch):
        samples = []
        for i in range(start, min(n_scenes, start + batch)):
            rng = _sample_rng(cfg.seed + 7919, EVAL_SEED_BASE, i)
            samples.append(make_sample(EVAL_SEED_BASE + i, task, 5, grid, tok, rng, cfg.profile))
        gens = model.generate(
            images_to_tensor([s.image for s in samples]),
            [s.seq.prompt for s in samples],
            max_len=cfg.max_new_tokens,
            stop_ids=(tok.eos_id,),
        )
        for img_i, (s, gen) in enumerate(zip(samples, gens)):
            invalid_ids += sum(1 for t in gen.ids if t >= model.v_text + grid.n_merged)
            groups = parse_response(gen.ids, gen.hidden, model.v_text, grid.n_merged)
            n_groups.append(len(groups))
            preds = []
            if groups:
                with torch.no_grad():
                    out = model.decoder(
                        [g.hidden for g in groups],
                        gen.patch_features.unsqueeze(0).expand(len(groups), -1, -1),
                        model.merged_pos,
                    )
                preds = out.predictions()
            ann = s.annotation
            if task == "REC":
                ref = s.seq.group_objects[0]
                gt_box = ann.objects[ref].box
                gt_mask = ann.objects[ref].mask
                if preds:
                    p = preds[0]
                    ious.append(M.box_iou(p.box.numpy(), gt_box))
                    pred_masks.append(p.pixel_mask(ann.image_h, ann.image_w).numpy())
                    fg = set(object_foreground(grid, ann, ref))
                    on_target.append(all(v in fg for v in groups[0].vrt_ids))
                else:
                    ious.append(0.0)
                    pred_masks.append(None)
                    on_target.append(False)
                gt_masks.append(gt_mask)
            elif task == "OVD":
                cats = group_categories(gen.ids, groups, tok, grid.n_merged)
                for c, p in zip(cats, preds):
                    if c is not None:
                        dets.append((start + img_i, c, float(p.score), p.box.numpy()))
                for o in ann.objects:
                    gts.append((start + img_i, o.category, o.box))
            else:
                tp, npred, ngt = M.greedy_precision_recall([p.box.numpy() for p in preds], [o.box for o in ann.objects])
                ric_tp += tp
                ric_pred += npred
                ric_gt += ngt
    res: dict = {"task": task, "n": n_scenes, "invalid_vrt_ids": invalid_ids, "mean_groups": float(np.mean(n_groups))}
    if task == "REC":
        res.update(
            acc50=M.accuracy_at(ious, 0.5),
            acc75=M.accuracy_at(ious, 0.75),
            ciou=M.cumulative_iou(pred_masks, gt_masks),
            mean_iou=float(np.mean(ious)),
            vrt_on_target=float(np.mean(on_target)),
        )
    elif task == "OVD":
        ap50 = M.average_precision(dets, gts, 0.5)
        res.update(
            ap50=float(np.nanmean(list(ap50.values()))) if ap50 else 0.0,
            ap50_95=M.mean_ap(dets, gts, M.IOU_THRESHOLDS),
            ap50_per_class=ap50,
        )
    else:
        res.update(
            greedy_precision=ric_tp / ric_pred if ric_pred else 0.0,
            greedy_recall=ric_tp / ric_gt if ric_gt else 0.0,
        )
    return res


def evaluate_checkpoint(path, task: str | None = None, n_scenes: int | None = None) -> dict:
    model, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta.get("run", {}))
    return evaluate(model, cfg, n_scenes=n_scenes, task=task)


# ---------------------------------------------------------------------------
# ablations

ABLATION_AXES = {
    "n_vrt": (1, 3, 5, 8, ALL),
    "robust_mask": (True, False),
    "use_projector": (True, False),
}


def ablation_grid(base: RunConfig, grid: dict[str, list]) -> list[RunConfig]:
    """Cartesian product of ``grid`` values over ``base``."""
    configs = [base]
    for key, values in grid.items():
        configs = [replace(c, **{key: v}) for c in configs for v in values]
    return configs


def ablate(configs: list[RunConfig], metric_keys=("acc50", "acc75", "ciou"), out_dir=None) -> list[dict]:
    rows = []
    for c in configs:
        sub = None
        if out_dir:
            sub = Path(out_dir) / f"nvrt-{c.n_vrt}_robust-{int(c.robust_mask)}_fvp-{int(c.use_projector)}"
        _, report = train(c, sub)
        m = report.get("metrics", {})
        rows.append(
            {"n_vrt": c.n_vrt, "robust_mask": c.robust_mask, "use_projector": c.use_projector,
             **{k: m.get(k) for k in metric_keys}}
        )
    if out_dir:
        write_ablation_table(rows, out_dir, metric_keys)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [" | ".join(keys), " | ".join("---" for _ in keys)]
    for r in rows:
        lines.append(" | ".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines)


def write_ablation_table(rows: list[dict], out_dir, metric_keys) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    (out / "ablation.md").write_text(format_table(rows) + "\n")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{r['n_vrt']}/{'R' if r['robust_mask'] else '-'}/{'P' if r['use_projector'] else '-'}" for r in rows]
    for k in metric_keys:
        vals = [r[k] if r[k] is not None else 0.0 for r in rows]
        fig, ax = plt.subplots(figsize=(max(4, len(rows) * 0.9), 3))
        ax.bar(range(len(rows)), vals)
        ax.set_xticks(range(len(rows)), labels, rotation=45, ha="right")
        ax.set_ylabel(k)
        ax.set_title(f"{k} (n_vrt / robust / projector)")
        fig.tight_layout()
        fig.savefig(out / f"ablation_{k}.png")
        plt.close(fig)
