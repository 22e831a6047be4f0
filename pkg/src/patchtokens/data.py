"""Synthetic shape scenes, JSON-lines manifests and a COCO instance reader."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .kernels import fill_polygon, rle_decode, rle_encode
from .sequencing import ObjectAnnotation, SceneAnnotation
from .tokenizer import COLORS, KINDS

log = logging.getLogger(__name__)

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
}
assert tuple(PALETTE) == COLORS


@dataclass(frozen=True)
class SceneProfile:
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 20
    max_size: int = 44
    max_iou: float = 0.3
    min_visible: float = 0.5
    noise: int = 8


SCENE_PROFILES = {
    "tiny": SceneProfile(image_size=56, min_size=12, max_size=26),
    "toy": SceneProfile(),
    "large-toy": SceneProfile(image_size=96, min_objects=2, max_objects=4),
}


def scene_profile(name_or_profile) -> SceneProfile:
    if isinstance(name_or_profile, SceneProfile):
        return name_or_profile
    return SCENE_PROFILES[name_or_profile]


def shape_mask(kind: str, size: int, x: int, y: int, h: int, w: int) -> np.ndarray:
    """Full (un-occluded) raster of a shape whose bounding square starts at (x, y)."""
    m = np.zeros((h, w), dtype=bool)
    if kind == "square":
        m[y : y + size, x : x + size] = True
    elif kind == "circle":
        r = size / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        m = (xx + 0.5 - (x + r)) ** 2 + (yy + 0.5 - (y + r)) ** 2 <= r * r
    elif kind == "triangle":
        xs = np.array([x, x + size, x + size / 2.0])
        ys = np.array([y + size, y + size, y])
        m = fill_polygon(h, w, xs, ys)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open pixel bounds (x0, y0, x1, y1) of the positive pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _box_iou(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def generate_scene(seed: int, profile="toy") -> tuple[np.ndarray, SceneAnnotation]:
    """Rasterise 1-4 coloured shapes with unique (colour, kind) pairs.

    Later shapes are drawn on top; every object keeps at least
    ``min_visible`` of its area and its box is the tight bound of the visible
    mask, so annotations are exact.
    """
    prof = scene_profile(profile)
    rng = np.random.default_rng(seed)
    S = prof.image_size
    n_obj = int(rng.integers(prof.min_objects, prof.max_objects + 1))
    combos = [(c, k) for c in COLORS for k in KINDS]
    order = rng.permutation(len(combos))

    placed: list[dict] = []
    for ci in order[:n_obj]:
        color, kind = combos[ci]
        for _ in range(60):
            size = int(rng.integers(prof.min_size, prof.max_size + 1))
            x = int(rng.integers(0, S - size + 1))
            y = int(rng.integers(0, S - size + 1))
            full = shape_mask(kind, size, x, y, S, S)
            box = tight_box(full)
            if any(_box_iou(box, p["full_box"]) > prof.max_iou for p in placed):
                continue
            if any((p["visible"] & ~full).sum() < prof.min_visible * p["full"].sum() for p in placed):
                continue
            for p in placed:
                p["visible"] = p["visible"] & ~full
            placed.append(dict(color=color, kind=kind, full=full, visible=full.copy(), full_box=box))
            break

    img = np.full((S, S, 3), int(rng.integers(30, 70)), dtype=np.int16)
    img += rng.integers(-prof.noise, prof.noise + 1, size=img.shape, dtype=np.int16)
    objects = []
    for p in placed:
        rgb = np.array(PALETTE[p["color"]], dtype=np.int16)
        img[p["full"]] = rgb + rng.integers(-prof.noise, prof.noise + 1, size=(int(p["full"].sum()), 3))
    for p in placed:
        x0, y0, x1, y1 = tight_box(p["visible"])
        objects.append(
            ObjectAnnotation(
                category=p["kind"],
                box=(x0 / S, y0 / S, x1 / S, y1 / S),
                mask=p["visible"],
                phrase=f"the {p['color']} {p['kind']}",
            )
        )
    image = np.clip(img, 0, 255).astype(np.uint8)
    return image, SceneAnnotation(S, S, objects)


# ---------------------------------------------------------------------------
# JSON-lines manifests


def annotation_to_record(ann: SceneAnnotation, **extra) -> dict:
    objs = []
    for o in ann.objects:
        rec = {"category": o.category, "box": [round(v, 8) for v in o.box]}
        if o.mask is not None:
            rec["mask"] = {"size": [ann.image_h, ann.image_w], "counts": rle_encode(o.mask)}
        if o.phrase is not None:
            rec["phrase"] = o.phrase
        objs.append(rec)
    return {**extra, "height": ann.image_h, "width": ann.image_w, "objects": objs}


def record_to_annotation(rec: dict) -> SceneAnnotation:
    h, w = int(rec["height"]), int(rec["width"])
    objs = []
    for o in rec["objects"]:
        mask = None
        if "mask" in o and o["mask"] is not None:
            mh, mw = o["mask"]["size"]
            mask = rle_decode(o["mask"]["counts"], mh, mw)
        objs.append(ObjectAnnotation(o["category"], tuple(o["box"]), mask, o.get("phrase")))
    return SceneAnnotation(h, w, objs)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_manifest(out_dir, seeds, profile="toy", images: bool = True) -> Path:
    """Materialise scenes as ``scenes.jsonl`` (+ lossless PNGs under ``images/``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images:
        (out / "images").mkdir(exist_ok=True)
    manifest = out / "scenes.jsonl"
    with open(manifest, "w") as fh:
        for seed in seeds:
            img, ann = generate_scene(int(seed), profile)
            extra = {"seed": int(seed)}
            if images:
                rel = f"images/{int(seed):08d}.png"
                write_png(out / rel, img)
                extra["image"] = rel
            fh.write(json.dumps(annotation_to_record(ann, **extra)) + "\n")
    return manifest


def read_manifest(path, profile="toy") -> Iterator[tuple[np.ndarray, SceneAnnotation]]:
    """Yield (image, annotation); scenes without a PNG are regenerated from their seed."""
    path = Path(path)
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ann = record_to_annotation(rec)
            if rec.get("image"):
                img = read_png(path.parent / rec["image"])
            else:
                img, _ = generate_scene(int(rec["seed"]), profile)
            yield img, ann


# ---------------------------------------------------------------------------
# COCO


def coco_string_to_counts(s: str) -> list[int]:
    """Decode the compressed COCO RLE string format into run lengths."""
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def counts_to_coco_string(counts) -> str:
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def segmentation_to_mask(seg, h: int, w: int) -> np.ndarray:
    if isinstance(seg, list):
        m = np.zeros((h, w), dtype=bool)
        for poly in seg:
            pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
            m |= fill_polygon(h, w, pts[:, 0], pts[:, 1])
        return m
    if isinstance(seg, dict):
        counts = seg["counts"]
        sh, sw = seg.get("size", (h, w))
        if isinstance(counts, str):
            counts = coco_string_to_counts(counts)
        return rle_decode(counts, int(sh), int(sw))
    raise ValueError(f"unsupported segmentation type {type(seg).__name__}")


class CocoReader:
    """Iterate a COCO instances file as (image, SceneAnnotation) pairs.

    Crowd annotations are dropped.  Images missing on disk are skipped and
    counted in ``missing_images``; annotations that cannot be converted are
    skipped and described in ``errors``.
    """

    def __init__(self, instances_file, images_dir, with_masks: bool = True):
        self.instances_file = Path(instances_file)
        self.images_dir = Path(images_dir)
        self.with_masks = with_masks
        with open(self.instances_file) as fh:
            self.data = json.load(fh)
        self.categories = {c["id"]: c["name"] for c in self.data.get("categories", [])}
        self.missing_images = 0
        self.errors: list[str] = []

    def __iter__(self) -> Iterator[tuple[np.ndarray, SceneAnnotation]]:
        by_image: dict[int, list[dict]] = {}
        for a in self.data.get("annotations", []):
            by_image.setdefault(a.get("image_id"), []).append(a)
        for info in self.data.get("images", []):
            path = self.images_dir / info["file_name"]
            if not os.path.exists(path):
                self.missing_images += 1
                log.warning("missing image %s", path)
                continue
            h, w = int(info["height"]), int(info["width"])
            objs = []
            for a in by_image.get(info["id"], []):
                if a.get("iscrowd", 0):
                    continue
                try:
                    objs.append(self._convert(a, h, w))
                except (KeyError, ValueError, TypeError) as exc:
                    self.errors.append(f"annotation {a.get('id')}: {exc}")
            yield read_png(path), SceneAnnotation(h, w, objs)

    def _convert(self, a: dict, h: int, w: int) -> ObjectAnnotation:
        bx, by, bw, bh = (float(v) for v in a["bbox"])
        box = (
            min(max(bx / w, 0.0), 1.0),
            min(max(by / h, 0.0), 1.0),
            min(max((bx + bw) / w, 0.0), 1.0),
            min(max((by + bh) / h, 0.0), 1.0),
        )
        mask = None
        if self.with_masks and a.get("segmentation"):
            mask = segmentation_to_mask(a["segmentation"], h, w)
        return ObjectAnnotation(self.categories[a["category_id"]], box, mask)


def load_coco(instances_file, images_dir, with_masks: bool = True) -> CocoReader:
    return CocoReader(instances_file, images_dir, with_masks)
