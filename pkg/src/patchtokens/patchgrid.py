"""Index arithmetic between pixels, raw patches, merged patches and vocabulary ids.

Merged patches are numbered row-major over the merged grid.  Pixel
rectangles are half-open: ``(x0, y0, x1, y1)`` covers columns ``x0..x1-1``
and rows ``y0..y1-1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyRegionError
from .kernels import cell_hits


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch_size: int
    merge_factor: int

    @property
    def cell(self) -> int:
        """Side of a merged patch in pixels."""
        return self.patch_size * self.merge_factor

    @property
    def raw_rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def raw_cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def rows_merged(self) -> int:
        return self.image_h // self.cell

    @property
    def cols_merged(self) -> int:
        return self.image_w // self.cell

    @property
    def n_raw(self) -> int:
        return self.raw_rows * self.raw_cols

    @property
    def n_merged(self) -> int:
        return self.rows_merged * self.cols_merged


def build_patch_grid(image_h: int, image_w: int, patch_size: int, merge_factor: int) -> PatchGrid:
    if patch_size < 1 or merge_factor < 1:
        raise DimensionError("patch_size and merge_factor must be positive")
    step = patch_size * merge_factor
    for axis, size in (("image_h", image_h), ("image_w", image_w)):
        if size <= 0 or size % step:
            raise DimensionError(
                f"{axis}={size} is not a positive multiple of patch_size*merge_factor={step}"
            )
    return PatchGrid(int(image_h), int(image_w), int(patch_size), int(merge_factor))


def merged_patch_rect(grid: PatchGrid, n: int) -> tuple[int, int, int, int]:
    if not 0 <= n < grid.n_merged:
        raise IndexError(f"merged patch {n} out of range [0, {grid.n_merged})")
    r, c = divmod(int(n), grid.cols_merged)
    s = grid.cell
    return (c * s, r * s, (c + 1) * s, (r + 1) * s)


def vrt_to_vocab(index: int, v_text: int) -> int:
    return v_text + int(index)


def vocab_to_vrt(token_id: int, v_text: int, n_merged: int) -> int:
    idx = int(token_id) - v_text
    if not 0 <= idx < n_merged:
        raise IndexError(f"token {token_id} is not a visual reference id")
    return idx


def foreground_vrts(grid: PatchGrid, mask=None, box=None) -> list[int]:
    """Merged patches touched by a pixel mask or by the interior of a pixel box.

    Exactly one of ``mask`` (bool array of image shape) or ``box``
    (``x0, y0, x1, y1`` in pixels) must be given.  Returns sorted indices.
    """
    if (mask is None) == (box is None):
        raise ValueError("pass exactly one of mask= or box=")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (grid.image_h, grid.image_w):
            raise DimensionError(
                f"mask shape {mask.shape} != image ({grid.image_h}, {grid.image_w})"
            )
        if not mask.any():
            raise EmptyRegionError("mask has no positive pixels")
        hits = cell_hits(mask, grid.cell, grid.cell)
        return [int(i) for i in np.flatnonzero(hits)]

    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x1 > x0 and y1 > y0):
        raise EmptyRegionError(f"degenerate box {tuple(box)}")
    if x0 < 0 or y0 < 0 or x1 > grid.image_w or y1 > grid.image_h:
        raise EmptyRegionError(f"box {tuple(box)} outside image bounds")
    s = grid.cell
    cx0 = np.arange(grid.cols_merged) * s
    cy0 = np.arange(grid.rows_merged) * s
    col_ok = (cx0 < x1) & (cx0 + s > x0)
    row_ok = (cy0 < y1) & (cy0 + s > y0)
    hits = row_ok[:, None] & col_ok[None, :]
    return [int(i) for i in np.flatnonzero(hits)]


def cell_centers(grid: PatchGrid) -> np.ndarray:
    """(n_merged, 2) array of merged-patch centres in normalised (x, y)."""
    rows, cols = np.divmod(np.arange(grid.n_merged), grid.cols_merged)
    xs = (cols + 0.5) * grid.cell / grid.image_w
    ys = (rows + 0.5) * grid.cell / grid.image_h
    return np.stack([xs, ys], axis=1)
