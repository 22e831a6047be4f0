"""Dynamic embedding table: text rows followed by this image's visual prototypes.

The same concatenated table embeds input ids and scores output logits, so a
visual reference id is only meaningful next to the image that produced it.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError

LN_EPS = 1e-5


class VisualProjector(nn.Module):
    """LayerNorm followed by a rank-``r`` linear map ``d -> r -> d``.

    With ``enabled=False`` the projector is the identity (ablation of the
    projection).
    """

    def __init__(self, d: int, rank: int | None = None, enabled: bool = True):
        super().__init__()
        rank = rank or max(1, d // 4)
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.d = d
        self.rank = rank
        self.enabled = enabled
        self.norm = nn.LayerNorm(d, eps=LN_EPS)
        self.down = nn.Parameter(torch.empty(d, rank))
        self.up = nn.Parameter(torch.empty(rank, d))
        # prototypes start on the scale of the text table (entries ~0.02), so
        # the initial next-token distribution is close to uniform
        nn.init.normal_(self.down, std=d**-0.5)
        nn.init.normal_(self.up, std=0.02 * rank**-0.5)

    def forward(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return self.norm(x) @ self.down @ self.up


def project_prototypes(patch_features: Tensor, proj: VisualProjector) -> Tensor:
    if patch_features.shape[-1] != proj.d:
        raise ShapeError(f"patch feature width {patch_features.shape[-1]} != projector width {proj.d}")
    return proj(patch_features)


class DynamicVocabulary:
    """Per-image vocabulary of ``V_text + N'`` rows (optionally batched).

    ``text`` is the shared (V_text, d) parameter; ``prototypes`` is (N', d) or
    (B, N', d).  Both routes (:meth:`embed`, :meth:`logits`) read these same
    tensors, so an in-place edit to either is seen by both.
    """

    def __init__(self, text: Tensor, prototypes: Tensor):
        if text.shape[-1] != prototypes.shape[-1]:
            raise ShapeError(
                f"text width {text.shape[-1]} != prototype width {prototypes.shape[-1]}"
            )
        self.text = text
        self.prototypes = prototypes

    @property
    def v_text(self) -> int:
        return self.text.shape[0]

    @property
    def n_visual(self) -> int:
        return self.prototypes.shape[-2]

    @property
    def total_size(self) -> int:
        return self.v_text + self.n_visual

    @property
    def batched(self) -> bool:
        return self.prototypes.dim() == 3

    @property
    def table(self) -> Tensor:
        """(V_text + N', d) matrix for an unbatched vocabulary."""
        if self.batched:
            raise ValueError("table is only defined for a single image")
        return torch.cat([self.text, self.prototypes], dim=0)

    def lookup(self, token_id: int) -> Tensor:
        if not 0 <= token_id < self.total_size:
            raise IndexError(f"id {token_id} outside [0, {self.total_size})")
        if token_id < self.v_text:
            return self.text[token_id]
        return self.prototypes[..., token_id - self.v_text, :]

    def embed(self, ids: Tensor) -> Tensor:
        """Rows for ``ids`` ((T,) or (B, T)); visual ids index this image's prototypes."""
        is_vis = ids >= self.v_text
        text_ids = torch.where(is_vis, torch.zeros_like(ids), ids)
        out = F.embedding(text_ids, self.text)
        if not bool(is_vis.any()):
            return out
        vis_ids = torch.where(is_vis, ids - self.v_text, torch.zeros_like(ids))
        if self.batched:
            idx = vis_ids.unsqueeze(-1).expand(*vis_ids.shape, self.prototypes.shape[-1])
            vis = torch.gather(self.prototypes, 1, idx)
        else:
            vis = self.prototypes[vis_ids]
        return torch.where(is_vis.unsqueeze(-1), vis, out)

    def logits(self, hidden: Tensor) -> Tensor:
        """Inner product of every vocabulary row with ``hidden`` (..., d)."""
        if hidden.shape[-1] != self.text.shape[-1]:
            raise ShapeError(f"hidden width {hidden.shape[-1]} != vocabulary width {self.text.shape[-1]}")
        text_logits = hidden @ self.text.T
        if self.batched:
            squeeze = hidden.dim() == 2
            h = hidden.unsqueeze(1) if squeeze else hidden
            vis_logits = h @ self.prototypes.transpose(1, 2)
            if squeeze:
                vis_logits = vis_logits.squeeze(1)
        else:
            vis_logits = hidden @ self.prototypes.T
        return torch.cat([text_logits, vis_logits], dim=-1)


def expand_vocabulary(text: Tensor, prototypes: Tensor) -> DynamicVocabulary:
    return DynamicVocabulary(text, prototypes)


def logits(vocab: DynamicVocabulary, hidden: Tensor) -> Tensor:
    return vocab.logits(hidden)
