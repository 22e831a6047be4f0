"""Checkpoint container: a NumPy ``.npz`` of named float tensors plus a JSON header.

Layout (format ``patchtokens-checkpoint``, version 1):

* ``__meta__``: 0-d unicode array holding JSON with keys ``format``,
  ``version``, ``model`` (ModelConfig fields) and ``run`` (RunConfig fields,
  may be empty).
* every other key: a ``state_dict`` entry of :class:`ToyMLLM`, stored as
  float32 (or its original integer dtype), e.g. ``text_table``,
  ``projector.down``, ``decoder.task_tokens``, ``decoder.blocks.0.q2i.q.weight``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "patchtokens-checkpoint"
VERSION = 1


def save_checkpoint(path, model, run: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": FORMAT, "version": VERSION, "model": model.cfg.to_dict(), "run": run or {}}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path} is not a {FORMAT} file")
        if meta.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        tensors = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, tensors


def load_checkpoint(path):
    """Rebuild the model; returns ``(model, meta)``."""
    from .toymodel import ModelConfig, ToyMLLM

    meta, tensors = read_checkpoint(path)
    model = ToyMLLM(ModelConfig(**meta["model"]))
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model, meta
