"""Single-scene prediction dump: decoded text, structured predictions, overlay PNG."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import PALETTE, write_png
from .harness import RunConfig, _sample_rng, eval_task, images_to_tensor, make_sample
from .sequencing import parse_response
from .tokenizer import TextTokenizer

_OUTLINE = list(PALETTE.values())


def predict_scene(model, cfg: RunConfig, seed: int, task: str | None = None) -> dict:
    """Greedy-decode one generated scene and decode every object group."""
    tok = TextTokenizer()
    grid = model.grid
    task = eval_task((task or cfg.task).upper())
    sample = make_sample(seed, task, 5, grid, tok, _sample_rng(seed), cfg.profile)
    gen = model.generate(
        images_to_tensor([sample.image]), [sample.seq.prompt], cfg.max_new_tokens, (tok.eos_id,)
    )[0]
    groups = parse_response(gen.ids, gen.hidden, model.v_text, grid.n_merged)
    preds = []
    if groups:
        with torch.no_grad():
            out = model.decoder(
                [g.hidden for g in groups],
                gen.patch_features.unsqueeze(0).expand(len(groups), -1, -1),
                model.merged_pos,
            )
        preds = out.predictions()
    ann = sample.annotation
    return {
        "seed": seed,
        "task": task,
        "prompt": tok.decode(sample.seq.prompt, grid.n_merged),
        "response": tok.decode(gen.ids, grid.n_merged),
        "truncated": gen.truncated,
        "image": sample.image,
        "annotation": ann,
        "groups": [
            {
                "vrt_ids": g.vrt_ids,
                "box": [round(float(v), 5) for v in p.box],
                "score": round(float(p.score), 5),
                "mask": p.pixel_mask(ann.image_h, ann.image_w).numpy(),
            }
            for g, p in zip(groups, preds)
        ],
    }


def _rect(box, w: int, h: int) -> list[float]:
    x0, y0, x1, y1 = box
    return [x0 * w, y0 * h, max(x0 * w, x1 * w - 1), max(y0 * h, y1 * h - 1)]


def overlay(image: np.ndarray, result: dict, grid) -> np.ndarray:
    """Tint predicted masks, outline predicted boxes, dot the chosen VRT cells."""
    from PIL import Image, ImageDraw

    h, w = image.shape[:2]
    canvas = image.astype(np.float32)
    for k, g in enumerate(result["groups"]):
        color = np.array(_OUTLINE[k % len(_OUTLINE)], dtype=np.float32)
        m = g["mask"]
        canvas[m] = 0.5 * canvas[m] + 0.5 * color
    im = Image.fromarray(canvas.clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    cell = grid.cell
    for k, g in enumerate(result["groups"]):
        color = _OUTLINE[k % len(_OUTLINE)]
        draw.rectangle(_rect(g["box"], w, h), outline=color)
        for v in g["vrt_ids"]:
            r, c = divmod(v, grid.cols_merged)
            cx, cy = c * cell + cell / 2, r * cell + cell / 2
            draw.ellipse([cx - 2, cy - 2, cx + 2, cy + 2], fill=(255, 255, 255), outline=color)
    for o in result["annotation"].objects:
        draw.rectangle(_rect(o.box, w, h), outline=(255, 255, 255), width=1)
    return np.asarray(im)


def run_demo(model, cfg: RunConfig, seeds, out_dir, task: str | None = None, scale: int = 4) -> list[dict]:
    """Write ``scene_<seed>.png`` (input), ``overlay_<seed>.png`` and ``predictions.json``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in seeds:
        res = predict_scene(model, cfg, int(seed), task)
        ov = overlay(res["image"], res, model.grid)
        big = lambda a: np.asarray(Image.fromarray(a).resize((a.shape[1] * scale, a.shape[0] * scale), Image.NEAREST))
        write_png(out / f"scene_{seed}.png", big(res["image"]))
        write_png(out / f"overlay_{seed}.png", big(ov))
        records.append(
            {
                "seed": res["seed"],
                "task": res["task"],
                "prompt": res["prompt"],
                "response": res["response"],
                "truncated": res["truncated"],
                "ground_truth": [
                    {"phrase": o.phrase, "category": o.category, "box": [round(v, 5) for v in o.box]}
                    for o in res["annotation"].objects
                ],
                "predictions": [{k: v for k, v in g.items() if k != "mask"} for g in res["groups"]],
            }
        )
    (out / "predictions.json").write_text(json.dumps(records, indent=2))
    return records

