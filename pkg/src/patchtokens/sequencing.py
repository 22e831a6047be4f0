"""Task templates, VRT sampling, response parsing and the CE supervision mask."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyRegionError, InvalidMaskError, TaskError, VocabularyRangeError
from .tokenizer import TextTokenizer

ALL = "all"

TASKS = ("REC", "RES", "OVD", "RIC")

REC_PROMPT = 'Please carefully check the image and detect the object this sentence describes: "{question}".'
OVD_PROMPT = "Please carefully check the image and detect the following objects: [{targets}]."
RIC_PROMPT = "Please describe this image."


@dataclass
class ObjectAnnotation:
    category: str
    box: tuple[float, float, float, float]  # normalised x0, y0, x1, y1
    mask: np.ndarray | None = None
    phrase: str | None = None

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = (float(v) for v in self.box)
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"box {self.box} is not a normalised x0<x1, y0<y1 box")
        self.box = (x0, y0, x1, y1)

    @property
    def name(self) -> str:
        """Noun phrase used in captions ("red square")."""
        if self.phrase:
            return self.phrase[4:] if self.phrase.startswith("the ") else self.phrase
        return self.category


@dataclass
class SceneAnnotation:
    image_h: int
    image_w: int
    objects: list[ObjectAnnotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        for obj in self.objects:
            if obj.mask is not None and obj.mask.shape != (self.image_h, self.image_w):
                raise ValueError(
                    f"mask shape {obj.mask.shape} != image ({self.image_h}, {self.image_w})"
                )

    def pixel_box(self, i: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.objects[i].box
        return (x0 * self.image_w, y0 * self.image_h, x1 * self.image_w, y1 * self.image_h)


@dataclass
class VrtSequence:
    """Prompt + target ids over the dynamic vocabulary of one image.

    ``step_object[j]`` is the index (into ``annotation.objects``) of the object
    whose VRTs are being emitted at target step ``j``, or -1 for text.
    ``groups[k]`` lists the VRT indices of the k-th emitted object, which is
    ``group_objects[k]``.
    """

    ids: list[int]
    task: str
    prompt_len: int
    v_text: int
    n_visual: int
    step_object: list[int]
    groups: list[list[int]]
    group_objects: list[int]

    @property
    def prompt(self) -> list[int]:
        return self.ids[: self.prompt_len]

    @property
    def target(self) -> list[int]:
        return self.ids[self.prompt_len :]

    def step_selected(self) -> list[list[int]]:
        """Per target step, the sampled VRT set of the active object (empty for text)."""
        by_obj = dict(zip(self.group_objects, self.groups))
        return [list(by_obj[o]) if o >= 0 else [] for o in self.step_object]


@dataclass
class ObjectQueryGroup:
    vrt_ids: list[int]
    hidden: object  # (len(vrt_ids), d) array/tensor, or None
    span: tuple[int, int]  # [start, end) in the parsed sequence


def sample_vrts(foreground: Sequence[int], n_vrt, rng=None) -> list[int]:
    """Uniformly pick ``min(n_vrt, |foreground|)`` distinct ids, returned ascending.

    ``n_vrt == ALL`` returns the whole foreground.  ``rng`` is a seed or a
    ``numpy.random.Generator``.
    """
    fg = sorted(set(int(v) for v in foreground))
    if not fg:
        raise EmptyRegionError("cannot sample VRTs from an empty foreground")
    if n_vrt == ALL:
        return fg
    n_vrt = int(n_vrt)
    if n_vrt < 1:
        raise ValueError("n_vrt must be >= 1")
    if n_vrt >= len(fg):
        return fg
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    picked = gen.choice(len(fg), size=n_vrt, replace=False)
    return sorted(fg[i] for i in picked)


class _Builder:
    def __init__(self, tok: TextTokenizer, n_visual: int):
        self.tok = tok
        self.v_text = tok.size
        self.n_visual = n_visual
        self.ids: list[int] = []
        self.step_object: list[int] = []
        self.groups: list[list[int]] = []
        self.group_objects: list[int] = []

    def text(self, s: str) -> None:
        new = self.tok.encode(s)
        self.ids.extend(new)
        self.step_object.extend([-1] * len(new))

    def special(self, token_id: int) -> None:
        self.ids.append(token_id)
        self.step_object.append(-1)

    def vrts(self, obj_index: int, vrts: Sequence[int]) -> None:
        if not vrts:
            raise EmptyRegionError(f"object {obj_index} has no sampled VRTs")
        for v in vrts:
            if not 0 <= v < self.n_visual:
                raise VocabularyRangeError(f"VRT {v} outside [0, {self.n_visual})")
            self.ids.append(self.v_text + int(v))
            self.step_object.append(obj_index)
        self.groups.append([int(v) for v in vrts])
        self.group_objects.append(obj_index)


def _article(word: str) -> str:
    return "an" if word[:1].lower() in "aeiou" else "a"


def _join(parts: list[str]) -> list[str]:
    """Separators placed before each part: '' , ', ' ... ' and '."""
    if len(parts) <= 1:
        return [""] * len(parts)
    return [""] + [", "] * (len(parts) - 2) + [" and "]


def render_template(
    task: str,
    annotation: SceneAnnotation,
    sampled: Sequence[Sequence[int] | None],
    tokenizer: TextTokenizer,
    n_visual: int,
    *,
    referred: int = 0,
    categories: Sequence[str] | None = None,
) -> VrtSequence:
    """Render prompt and ground-truth answer with VRT ids substituted.

    ``sampled[i]`` holds the VRT indices chosen for ``annotation.objects[i]``.
    REC/RES render only the ``referred`` object.  OVD queries ``categories``
    (default: the scene's categories in first-appearance order); a queried
    category with no instance gets a ``(none)`` clause.
    """
    task = task.upper()
    if task not in TASKS:
        raise TaskError(f"unknown task {task!r}; expected one of {TASKS}")
    b = _Builder(tokenizer, n_visual)
    objs = annotation.objects

    def need(i: int) -> Sequence[int]:
        s = sampled[i]
        if not s:
            raise EmptyRegionError(f"object {i} has no sampled VRTs")
        return s

    if task in ("REC", "RES"):
        obj = objs[referred]
        question = obj.phrase or obj.category
        b.text(REC_PROMPT.format(question=question))
        b.special(tokenizer.assistant_id)
        prompt_len = len(b.ids)
        b.text(f'The "{question}" refers to ')
        b.vrts(referred, need(referred))
        b.text(" in this image.")
    elif task == "OVD":
        if categories is None:
            categories = list(dict.fromkeys(o.category for o in objs))
        targets = ", ".join(f'"{c}"' for c in categories)
        b.text(OVD_PROMPT.format(targets=targets))
        b.special(tokenizer.assistant_id)
        prompt_len = len(b.ids)
        b.text("In this image,")
        seps = _join(list(categories))
        for sep, cat in zip(seps, categories):
            members = [i for i, o in enumerate(objs) if o.category == cat]
            b.text(f'{sep or " "}there are {len(members)} "{cat}" (')
            if not members:
                b.text("none")
            for j, i in enumerate(members):
                if j:
                    b.text(", ")
                b.vrts(i, need(i))
            b.text(")")
        b.text(".")
    else:  # RIC
        b.text(RIC_PROMPT)
        b.special(tokenizer.assistant_id)
        prompt_len = len(b.ids)
        if not objs:
            b.text("There is nothing in this image.")
        else:
            b.text("There is")
            for sep, (i, obj) in zip(_join([o.name for o in objs]), enumerate(objs)):
                b.text(f"{sep or ' '}{_article(obj.name)} {obj.name} (")
                b.vrts(i, need(i))
                b.text(")")
            b.text(".")
    b.special(tokenizer.eos_id)

    return VrtSequence(
        ids=b.ids,
        task=task,
        prompt_len=prompt_len,
        v_text=b.v_text,
        n_visual=n_visual,
        step_object=b.step_object[prompt_len:],
        groups=b.groups,
        group_objects=b.group_objects,
    )


def parse_response(
    ids: Sequence[int], hidden_states, v_text: int, n_visual: int
) -> list[ObjectQueryGroup]:
    """Split a token sequence into maximal runs of consecutive VRT ids.

    ``hidden_states`` (same length as ``ids``, or None) supplies the rows
    attached to each group.
    """
    if hidden_states is not None and len(hidden_states) != len(ids):
        raise ValueError(f"{len(ids)} ids but {len(hidden_states)} hidden states")
    groups: list[ObjectQueryGroup] = []
    start = None
    limit = v_text + n_visual

    def close(end: int) -> None:
        rows = hidden_states[start:end] if hidden_states is not None else None
        groups.append(
            ObjectQueryGroup([int(t) - v_text for t in ids[start:end]], rows, (start, end))
        )

    for i, t in enumerate(ids):
        t = int(t)
        if t >= limit or t < 0:
            raise VocabularyRangeError(f"token {t} at position {i} outside [0, {limit})")
        if t >= v_text:
            if start is None:
                start = i
        elif start is not None:
            close(i)
            start = None
    if start is not None:
        close(len(ids))
    return groups


def build_foreground_mask(
    target: Sequence[int],
    step_sets: Sequence[Sequence[int]],
    v_text: int,
    n_visual: int,
    step_foreground: Sequence[Sequence[int]] | None = None,
) -> np.ndarray:
    """T x N' uint8 matrix: 1 where a VRT logit is hidden from the softmax at a step.

    Without ``step_foreground``, column ``n`` of row ``t`` is 0 iff ``n`` is in
    ``step_sets[t]``; text steps pass an empty set and get an all-ones row.

    With ``step_foreground`` (the active object's full foreground per step,
    empty for text), only the foreground VRTs that were not selected are
    hidden: background VRTs stay in the softmax as negatives and text rows
    are all zeros.
    """
    if len(step_sets) != len(target):
        raise ValueError(f"{len(target)} target steps but {len(step_sets)} foreground sets")
    if step_foreground is not None and len(step_foreground) != len(target):
        raise ValueError(f"{len(target)} target steps but {len(step_foreground)} foreground sets")
    if step_foreground is None:
        m = np.ones((len(target), n_visual), dtype=np.uint8)
        for t, allowed in enumerate(step_sets):
            for n in allowed:
                m[t, int(n)] = 0
    else:
        m = np.zeros((len(target), n_visual), dtype=np.uint8)
        for t, (allowed, fg) in enumerate(zip(step_sets, step_foreground)):
            for n in fg:
                m[t, int(n)] = 1
            for n in allowed:
                m[t, int(n)] = 0
    for t, tok in enumerate(target):
        if int(tok) >= v_text and m[t, int(tok) - v_text]:
            raise InvalidMaskError(
                f"step {t}: ground-truth VRT {int(tok) - v_text} would be masked"
            )
    return m
