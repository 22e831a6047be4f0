"""Desk-scale multimodal LM: patch encoder, 2x2 merge projector, causal transformer.

The model consumes ``[F_patch ; prompt ids ; answer ids]`` and scores every
position against the per-image dynamic vocabulary.  It also owns the
structured decoder so a single checkpoint holds everything.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .decoder import StructuredDecoder
from .errors import DimensionError, ShapeError
from .patchgrid import PatchGrid, build_patch_grid
from .vocab import DynamicVocabulary, VisualProjector, expand_vocabulary, project_prototypes


@dataclass
class ModelConfig:
    image_size: int = 56
    patch_size: int = 14
    merge_factor: int = 2
    d_v: int = 64
    d: int = 128
    layers: int = 4
    heads: int = 4
    encoder_layers: int = 1
    decoder_depth: int = 3
    decoder_heads: int = 4
    mask_upsample: int = 4
    projector_rank: int | None = None  # default d // 4
    use_projector: bool = True
    max_len: int = 192
    v_text: int = 0  # filled from the tokenizer

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES: dict[str, dict] = {
    # The geometry example used throughout the unit tests: 56 px -> N' = 4.
    "tiny": dict(image_size=56, patch_size=14, d_v=32, d=64, layers=2, heads=4, max_len=160),
    # Desk-scale benchmark geometry: 96 px, 8 px patches -> 6x6 merged grid.
    "toy": dict(image_size=96, patch_size=8, d_v=64, d=128, layers=4, heads=4, max_len=160),
    "large-toy": dict(image_size=96, patch_size=8, d_v=128, d=256, layers=8, heads=8, max_len=160),
}


def model_config(profile: str = "toy", **overrides) -> ModelConfig:
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
    return ModelConfig(**{**PROFILES[profile], **overrides})


class Block(nn.Module):
    """Pre-norm transformer block; ``causal`` selects the attention mask."""

    def __init__(self, d: int, heads: int, causal: bool):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        shape = (B, T, self.heads, d // self.heads)
        q, k, v = (t.view(shape).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        x = x + self.proj(y.transpose(1, 2).reshape(B, T, d))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyVisionEncoder(nn.Module):
    """Raw patch embedding + 2-D position table + optional mixing layers -> (B, N, d_v)."""

    def __init__(self, grid: PatchGrid, d_v: int, layers: int = 1, heads: int = 4):
        super().__init__()
        self.grid = grid
        p = grid.patch_size
        self.embed = nn.Linear(p * p * 3, d_v)
        self.row_pos = nn.Parameter(torch.randn(grid.raw_rows, d_v) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(grid.raw_cols, d_v) * 0.02)
        self.use_pos = True
        self.mix = nn.ModuleList(Block(d_v, heads, causal=False) for _ in range(layers))
        self.norm = nn.LayerNorm(d_v)

    def patchify(self, images: Tensor) -> Tensor:
        B, C, H, W = images.shape
        g = self.grid
        if C != 3 or H != g.image_h or W != g.image_w:
            raise DimensionError(f"image {tuple(images.shape[1:])} != (3, {g.image_h}, {g.image_w})")
        p = g.patch_size
        x = images.reshape(B, C, g.raw_rows, p, g.raw_cols, p)
        return x.permute(0, 2, 4, 3, 5, 1).reshape(B, g.n_raw, p * p * C)

    def forward(self, images: Tensor) -> Tensor:
        x = self.embed(self.patchify(images))
        if self.use_pos:
            pos = (self.row_pos[:, None, :] + self.col_pos[None, :, :]).reshape(-1, x.shape[-1])
            x = x + pos
        for blk in self.mix:
            x = blk(x)
        return self.norm(x)


class MergeProjector(nn.Module):
    """Concatenate each 2x2 raw-patch neighbourhood (NW, NE, SW, SE) and map to width d."""

    def __init__(self, grid: PatchGrid, d_v: int, d: int):
        super().__init__()
        self.grid = grid
        m = grid.merge_factor
        self.linear = nn.Linear(m * m * d_v, d)

    def forward(self, feats: Tensor) -> Tensor:
        g = self.grid
        m = g.merge_factor
        B, N, dv = feats.shape
        x = feats.view(B, g.rows_merged, m, g.cols_merged, m, dv)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, g.n_merged, m * m * dv)
        return self.linear(x)


class ToyMLLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.v_text <= 0:
            raise ValueError("ModelConfig.v_text must be set from the tokenizer")
        self.cfg = cfg
        self.grid = build_patch_grid(cfg.image_size, cfg.image_size, cfg.patch_size, cfg.merge_factor)
        g = self.grid
        self.encoder = ToyVisionEncoder(g, cfg.d_v, cfg.encoder_layers, heads=max(1, min(cfg.heads, cfg.d_v // 16)))
        self.merge = MergeProjector(g, cfg.d_v, cfg.d)
        self.merged_pos = nn.Parameter(torch.randn(g.n_merged, cfg.d) * 0.02)
        self.projector = VisualProjector(cfg.d, cfg.projector_rank, enabled=cfg.use_projector)
        self.text_table = nn.Parameter(torch.randn(cfg.v_text, cfg.d) * 0.02)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.d) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, causal=True) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.d)
        self.decoder = StructuredDecoder(
            cfg.d, g.rows_merged, g.cols_merged, heads=cfg.decoder_heads,
            depth=cfg.decoder_depth, upsample=cfg.mask_upsample,
        )

    @property
    def v_text(self) -> int:
        return self.cfg.v_text

    @property
    def n_visual(self) -> int:
        return self.grid.n_merged

    # -- vision side -------------------------------------------------------

    def encode_image(self, images: Tensor) -> Tensor:
        """(B, 3, H, W) in [0, 1] -> F_patch (B, N', d), raster order."""
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        f = self.merge(self.encoder(images - 0.5))
        return f[0] if squeeze else f

    def build_vocab(self, patch_features: Tensor) -> DynamicVocabulary:
        return expand_vocabulary(self.text_table, project_prototypes(patch_features, self.projector))

    # -- language side -----------------------------------------------------

    def forward(self, patch_features: Tensor, ids: Tensor, vocab: DynamicVocabulary | None = None):
        """Run the LM over ``[F_patch ; embed(ids)]``.

        Returns ``(hidden, logits)`` for the text positions only: ``hidden`` is
        (B, T, d) and ``logits[:, t]`` is the distribution of token ``t + 1``.
        """
        if vocab is None:
            vocab = self.build_vocab(patch_features)
        if patch_features.shape[-1] != self.cfg.d:
            raise ShapeError(f"patch feature width {patch_features.shape[-1]} != d={self.cfg.d}")
        z = torch.cat([patch_features, vocab.embed(ids)], dim=1)
        L = z.shape[1]
        if L > self.cfg.max_len:
            raise ShapeError(f"sequence length {L} exceeds max_len={self.cfg.max_len}")
        x = z + self.pos[:L]
        for blk in self.blocks:
            x = blk(x)
        h = self.ln_f(x)[:, patch_features.shape[1] :]
        return h, vocab.logits(h)

    @torch.no_grad()
    def generate(
        self,
        images: Tensor,
        prompts: list[list[int]],
        max_len: int,
        stop_ids: tuple[int, ...] | None = None,
    ) -> list["Generation"]:
        """Greedy decoding over each image's dynamic vocabulary.

        Prompts of different lengths are run in separate equal-length batches.
        ``Generation.hidden[j]`` is the final-layer state that emitted token j.
        """
        if stop_ids is None:
            stop_ids = (2,)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        feats = self.encode_image(images)
        out: list[Generation | None] = [None] * len(prompts)
        by_len: dict[int, list[int]] = {}
        for i, p in enumerate(prompts):
            by_len.setdefault(len(p), []).append(i)
        for plen, idx in by_len.items():
            sub_feats = feats[idx]
            vocab = self.build_vocab(sub_feats)
            ids = torch.tensor([prompts[i] for i in idx], dtype=torch.long)
            n = len(idx)
            done = torch.zeros(n, dtype=torch.bool)
            gen_ids: list[Tensor] = []
            gen_h: list[Tensor] = []
            steps = min(max_len, self.cfg.max_len - sub_feats.shape[1] - plen + 1)
            for _ in range(max(steps, 0)):
                h, logits = self.forward(sub_feats, ids, vocab)
                nxt = logits[:, -1].argmax(-1)
                gen_ids.append(nxt)
                gen_h.append(h[:, -1])
                done = done | torch.isin(nxt, torch.tensor(stop_ids))
                if bool(done.all()):
                    break
                ids = torch.cat([ids, nxt[:, None]], dim=1)
            for j, i in enumerate(idx):
                toks: list[int] = []
                hs: list[Tensor] = []
                stopped = False
                for s in range(len(gen_ids)):
                    t = int(gen_ids[s][j])
                    toks.append(t)
                    hs.append(gen_h[s][j])
                    if t in stop_ids:
                        stopped = True
                        break
                hidden = torch.stack(hs) if hs else feats.new_zeros(0, self.cfg.d)
                out[i] = Generation(toks, hidden, truncated=not stopped, patch_features=feats[i])
        return out  # type: ignore[return-value]


@dataclass
class Generation:
    ids: list[int]
    hidden: Tensor
    truncated: bool
    patch_features: Tensor = field(repr=False)

    def text_ids(self, stop_ids=(2,)) -> list[int]:
        return [t for t in self.ids if t not in stop_ids]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
