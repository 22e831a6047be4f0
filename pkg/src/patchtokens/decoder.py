"""Lightweight structured decoder: VRT groups -> box, mask logits, score.

Each object group is prefixed with three learnable task tokens (box, mask,
score) and run through a stack of two-way attention blocks against the
image's merged patch features.  Groups of different lengths are decoded in
one padded batch; padding is excluded from every attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, key_pad: Tensor | None = None) -> Tensor:
        B, Tq, d = q.shape
        Tk = k.shape[1]
        h = self.heads
        qh = self.q(q).view(B, Tq, h, d // h).transpose(1, 2)
        kh = self.k(k).view(B, Tk, h, d // h).transpose(1, 2)
        vh = self.v(v).view(B, Tk, h, d // h).transpose(1, 2)
        att = (qh @ kh.transpose(-2, -1)) / (d // h) ** 0.5
        if key_pad is not None:
            att = att.masked_fill(key_pad[:, None, None, :], float("-inf"))
        att = att.softmax(-1)
        y = (att @ vh).transpose(1, 2).reshape(B, Tq, d)
        return self.out(y)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TwoWayBlock(nn.Module):
    """Query self-attn -> query-to-image attn -> MLP -> image-to-query attn.

    Each step is residual followed by LayerNorm.  ``image_to_query=False``
    drops the last step (ablation).
    """

    def __init__(self, d: int, heads: int, mlp_ratio: int = 2, image_to_query: bool = True):
        super().__init__()
        self.self_attn = Attention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.q2i = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = MLP(d, d * mlp_ratio, d)
        self.norm3 = nn.LayerNorm(d)
        self.image_to_query = image_to_query
        self.i2q = Attention(d, heads)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, queries: Tensor, image: Tensor, image_pe: Tensor, query_pad: Tensor | None):
        queries = self.norm1(queries + self.self_attn(queries, queries, queries, query_pad))
        keys = image + image_pe
        queries = self.norm2(queries + self.q2i(queries, keys, image))
        queries = self.norm3(queries + self.mlp(queries))
        if self.image_to_query:
            image = self.norm4(image + self.i2q(keys, queries, queries, query_pad))
        return queries, image


@dataclass
class StructuredPrediction:
    box: Tensor  # (4,) normalised x0, y0, x1, y1, canonical
    mask_logits: Tensor  # (rows*up, cols*up)
    score: Tensor  # scalar in [0, 1]

    def pixel_mask(self, image_h: int, image_w: int) -> Tensor:
        """Bilinear resize of the mask logits to image size, thresholded at 0 (p = 0.5)."""
        logits = self.mask_logits[None, None]
        logits = F.interpolate(logits, size=(image_h, image_w), mode="bilinear", align_corners=False)
        return logits[0, 0] > 0


@dataclass
class DecoderOutput:
    boxes: Tensor  # (G, 4) raw sigmoid outputs
    mask_logits: Tensor  # (G, H', W')
    scores: Tensor  # (G,)

    def predictions(self) -> list[StructuredPrediction]:
        from .losses import canonical_boxes

        boxes = canonical_boxes(self.boxes)
        return [
            StructuredPrediction(boxes[i], self.mask_logits[i], self.scores[i])
            for i in range(self.boxes.shape[0])
        ]


class StructuredDecoder(nn.Module):
    def __init__(
        self,
        d: int,
        rows: int,
        cols: int,
        heads: int = 4,
        depth: int = 3,
        upsample: int = 4,
        image_to_query: bool = True,
    ):
        super().__init__()
        self.d = d
        self.rows = rows
        self.cols = cols
        self.upsample = upsample
        self.task_tokens = nn.Parameter(torch.randn(3, d) * 0.02)  # box, mask, score
        self.blocks = nn.ModuleList(
            TwoWayBlock(d, heads, image_to_query=image_to_query) for _ in range(depth)
        )
        self.box_head = MLP(d, d, 4)
        self.score_head = MLP(d, d, 1)
        self.mask_embed = MLP(d, d, d)
        self.image_out = nn.Linear(d, d)

    def set_image_to_query(self, enabled: bool) -> None:
        for blk in self.blocks:
            blk.image_to_query = enabled

    def forward(self, group_hidden: list[Tensor], patch_features: Tensor, image_pe: Tensor) -> DecoderOutput:
        """Decode G groups at once.

        ``group_hidden[g]`` is (k_g, d); ``patch_features`` is (G, N', d), row g
        being the image of group g; ``image_pe`` is (N', d).
        """
        G = len(group_hidden)
        n_img = self.rows * self.cols
        if patch_features.shape[0] != G or patch_features.shape[1] != n_img:
            raise ShapeError(
                f"patch features {tuple(patch_features.shape)} do not match {G} groups "
                f"on a {self.rows}x{self.cols} grid"
            )
        if G == 0:
            up = (self.rows * self.upsample, self.cols * self.upsample)
            z = patch_features.new_zeros
            return DecoderOutput(z(0, 4), z(0, *up), z(0))
        kmax = max(int(h.shape[0]) for h in group_hidden)
        if min(int(h.shape[0]) for h in group_hidden) < 1:
            raise ShapeError("empty object group")
        dtype = patch_features.dtype
        q = patch_features.new_zeros(G, 3 + kmax, self.d)
        pad = torch.zeros(G, 3 + kmax, dtype=torch.bool, device=q.device)
        rows = []
        for g, h in enumerate(group_hidden):
            k = h.shape[0]
            body = torch.cat([h.to(dtype), h.new_zeros(kmax - k, self.d, dtype=dtype)], 0)
            rows.append(body)
            pad[g, 3 + k :] = True
        q = torch.cat([self.task_tokens.to(dtype).expand(G, 3, self.d), torch.stack(rows)], dim=1)
        query_pad = pad if bool(pad.any()) else None

        image = patch_features
        pe = image_pe.to(dtype).unsqueeze(0).expand(G, -1, -1)
        for blk in self.blocks:
            q, image = blk(q, image, pe, query_pad)

        boxes = torch.sigmoid(self.box_head(q[:, 0]))
        scores = torch.sigmoid(self.score_head(q[:, 2])).squeeze(-1)
        m = self.mask_embed(q[:, 1])  # (G, d)
        feats = self.image_out(image)  # (G, N', d)
        coarse = torch.einsum("gnd,gd->gn", feats, m) / self.d**0.5
        coarse = coarse.view(G, 1, self.rows, self.cols)
        fine = F.interpolate(coarse, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return DecoderOutput(boxes, fine[:, 0], scores)


def decode_group(decoder: StructuredDecoder, hidden: Tensor, patch_features: Tensor, image_pe: Tensor):
    """Single group ((k, d) hidden rows) against one image's (N', d) features."""
    if patch_features.dim() != 2:
        raise ShapeError("decode_group expects (N', d) patch features")
    return decoder([hidden], patch_features.unsqueeze(0), image_pe).predictions()[0]


def decode_all(decoder: StructuredDecoder, groups, patch_features: Tensor, image_pe: Tensor):
    """Order-preserving batched decode of every group of one image."""
    if not groups:
        return []
    hidden = [g.hidden if isinstance(g.hidden, Tensor) else torch.as_tensor(g.hidden) for g in groups]
    feats = patch_features.unsqueeze(0).expand(len(hidden), -1, -1)
    return decoder(hidden, feats, image_pe).predictions()
