"""Training objectives: masked per-token CE and the decoder's box/mask/score losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidMaskError, NumericError, ShapeError

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
DICE_EPS = 1.0


def masked_logits(logits: Tensor, mask: Tensor, v_text: int) -> Tensor:
    """Replace hidden visual logits with the dtype's most negative value.

    ``mask`` has shape ``logits.shape[:-1] + (N',)``; 1 hides column
    ``v_text + n``.  The replacement is below any finite logit by more than
    the exp underflow range, so hidden entries get probability exactly 0,
    and ``torch.where`` routes exactly zero gradient to them.
    """
    n_visual = logits.shape[-1] - v_text
    if mask.shape[-1] != n_visual or mask.shape[:-1] != logits.shape[:-1]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} incompatible with logits {tuple(logits.shape)}")
    hide = torch.cat(
        [torch.zeros(*logits.shape[:-1], v_text, dtype=torch.bool, device=logits.device), mask.bool()],
        dim=-1,
    )
    sentinel = torch.finfo(logits.dtype).min
    return torch.where(hide, torch.full_like(logits, sentinel), logits)


def robust_ce(
    logits: Tensor,
    targets: Tensor,
    mask: Tensor | None,
    v_text: int,
    valid: Tensor | None = None,
) -> Tensor:
    """Mean over supervised steps of ``-log softmax(masked logits)[target]``.

    ``logits`` (..., V_text + N'), ``targets`` (...), ``mask`` (..., N') or
    None for plain cross-entropy, ``valid`` optional bool (...) selecting the
    supervised steps.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to robust_ce")
    if valid is None:
        valid = torch.ones(targets.shape, dtype=torch.bool, device=targets.device)
    if mask is not None:
        is_vis = (targets >= v_text) & valid
        if bool(is_vis.any()):
            col = (targets - v_text).clamp(min=0)
            gt_hidden = torch.gather(mask, -1, col.unsqueeze(-1)).squeeze(-1).bool()
            if bool((gt_hidden & is_vis).any()):
                raise InvalidMaskError("a ground-truth visual token is masked")
        logits = masked_logits(logits, mask, v_text)
    logp = F.log_softmax(logits, dim=-1)
    nll = -torch.gather(logp, -1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    return nll.sum() / valid.sum().clamp(min=1)


# ---------------------------------------------------------------------------
# boxes


def box_area(b: Tensor) -> Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def canonical_boxes(b: Tensor) -> Tensor:
    """Swap inverted coordinates so that x0 <= x1 and y0 <= y1."""
    x = torch.sort(b[..., 0::2], dim=-1).values
    y = torch.sort(b[..., 1::2], dim=-1).values
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)


def pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU of matched pairs a[i] <-> b[i]."""
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union.clamp(min=1e-12)


def generalized_iou(a: Tensor, b: Tensor) -> Tensor:
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    ew = torch.maximum(a[..., 2], b[..., 2]) - torch.minimum(a[..., 0], b[..., 0])
    eh = torch.maximum(a[..., 3], b[..., 3]) - torch.minimum(a[..., 1], b[..., 1])
    enclose = (ew * eh).clamp(min=1e-12)
    union = union.clamp(min=1e-12)
    return inter / union - (enclose - union) / enclose


def clamp_degenerate(pred: Tensor) -> tuple[Tensor, Tensor]:
    """Collapse inverted boxes to zero width/height; also return the per-row flag."""
    bad = (pred[..., 0] >= pred[..., 2]) | (pred[..., 1] >= pred[..., 3])
    x1 = torch.maximum(pred[..., 2], pred[..., 0])
    y1 = torch.maximum(pred[..., 3], pred[..., 1])
    fixed = torch.stack([pred[..., 0], pred[..., 1], x1, y1], dim=-1)
    return fixed, bad


def bbox_loss(pred: Tensor, gt: Tensor, diagnostics: dict | None = None) -> Tensor:
    """Mean over pairs of ``(1 - GIoU) + sum |pred - gt|`` on normalised boxes."""
    if pred.shape != gt.shape or pred.shape[-1] != 4:
        raise ShapeError(f"box shapes {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    fixed, bad = clamp_degenerate(pred)
    if diagnostics is not None:
        diagnostics["degenerate_boxes"] = int(bad.sum())
    iou_term = 1.0 - generalized_iou(fixed, gt)
    l1 = (pred - gt).abs().sum(dim=-1)
    return (iou_term + l1).mean()


# ---------------------------------------------------------------------------
# masks


def dice_loss(prob: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Per-mask ``1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)``."""
    p = prob.flatten(1)
    g = gt.flatten(1).to(p.dtype)
    num = 2 * (p * g).sum(-1) + eps
    den = p.sum(-1) + g.sum(-1) + eps
    return 1 - num / den


def focal_loss(
    pred: Tensor, gt: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA, from_logits: bool = False
) -> Tensor:
    """Per-mask pixel-mean sigmoid focal loss."""
    g = gt.flatten(1).to(pred.dtype)
    x = pred.flatten(1)
    if from_logits:
        p = torch.sigmoid(x)
        log_pt = -F.binary_cross_entropy_with_logits(x, g, reduction="none")
    else:
        p = x
        pt_raw = p * g + (1 - p) * (1 - g)
        log_pt = torch.log(pt_raw.clamp(min=torch.finfo(p.dtype).tiny))
    pt = p * g + (1 - p) * (1 - g)
    alpha_t = alpha * g + (1 - alpha) * (1 - g)
    return (-alpha_t * (1 - pt) ** gamma * log_pt).mean(-1)


def mask_loss(
    pred: Tensor, gt: Tensor, eps: float = DICE_EPS, from_logits: bool = False
) -> Tensor:
    """Mean dice loss plus mean focal loss over L masks of shape (L, H, W)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    prob = torch.sigmoid(pred) if from_logits else pred
    return dice_loss(prob, gt, eps).mean() + focal_loss(pred, gt, from_logits=from_logits).mean()


def score_loss(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"score shapes {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.numel() == 0:
        return pred.sum() * 0.0
    return ((pred - gt) ** 2).mean()


@dataclass
class LossBreakdown:
    ce: Tensor
    bbox: Tensor
    mask: Tensor
    score: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("ce", "bbox", "mask", "score", "total")}


def total_loss(ce, bbox=None, mask=None, score=None, weights: dict | None = None) -> LossBreakdown:
    """Sum of the four terms; missing structured terms count as zero."""
    ce = torch.as_tensor(ce)
    zero = ce * 0.0
    parts = {
        "ce": ce,
        "bbox": zero if bbox is None else torch.as_tensor(bbox),
        "mask": zero if mask is None else torch.as_tensor(mask),
        "score": zero if score is None else torch.as_tensor(score),
    }
    w = {"ce": 1.0, "bbox": 1.0, "mask": 1.0, "score": 1.0, **(weights or {})}
    total = sum(w[k] * v for k, v in parts.items())
    return LossBreakdown(total=total, **parts)
