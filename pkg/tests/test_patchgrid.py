import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchtokens.errors import DimensionError, EmptyRegionError
from patchtokens.patchgrid import (
    build_patch_grid,
    foreground_vrts,
    merged_patch_rect,
    vocab_to_vrt,
    vrt_to_vocab,
)


def brute_force_rects(h, w, cell):
    """Assign every pixel to a raster-numbered cell, then read off each cell's extent."""
    cols = w // cell
    owner = {}
    for y in range(h):
        for x in range(w):
            n = (y // cell) * cols + (x // cell)
            x0, y0, x1, y1 = owner.get(n, (x, y, x + 1, y + 1))
            owner[n] = (min(x0, x), min(y0, y), max(x1, x + 1), max(y1, y + 1))
    return owner


def brute_force_foreground(grid, mask):
    hits = set()
    for n in range(grid.n_merged):
        x0, y0, x1, y1 = merged_patch_rect(grid, n)
        if mask[y0:y1, x0:x1].any():
            hits.add(n)
    return hits


def test_build_examples():
    g = build_patch_grid(56, 56, 14, 2)
    assert (g.n_raw, g.n_merged) == (16, 4)
    g1 = build_patch_grid(14, 14, 14, 1)
    assert (g1.n_raw, g1.n_merged) == (1, 1)
    g2 = build_patch_grid(84, 56, 14, 2)
    assert (g2.n_merged, g2.rows_merged, g2.cols_merged) == (6, 3, 2)
    assert len(brute_force_rects(84, 56, 28)) == 6


@pytest.mark.parametrize("h,w", [(50, 56), (56, 42)])
def test_build_names_offending_axis(h, w):
    with pytest.raises(DimensionError, match="image_h" if h == 50 else "image_w"):
        build_patch_grid(h, w, 14, 2)


def test_rect_examples_match_enumeration():
    g = build_patch_grid(56, 56, 14, 2)
    assert merged_patch_rect(g, 0) == (0, 0, 28, 28)
    oracle = brute_force_rects(56, 56, 28)
    assert merged_patch_rect(g, 3) == oracle[3] == (28, 28, 56, 56)
    g2 = build_patch_grid(84, 56, 14, 2)
    assert merged_patch_rect(g2, 2) == brute_force_rects(84, 56, 28)[2] == (0, 28, 28, 56)


def test_rect_out_of_range():
    g = build_patch_grid(56, 56, 14, 2)
    with pytest.raises(IndexError):
        merged_patch_rect(g, 4)


@pytest.mark.parametrize("shape", [(56, 56, 14, 2), (84, 56, 14, 2), (96, 96, 8, 2), (48, 32, 4, 4)])
def test_tiling_is_exact(shape):
    g = build_patch_grid(*shape)
    cover = np.zeros((g.image_h, g.image_w), int)
    for n in range(g.n_merged):
        x0, y0, x1, y1 = merged_patch_rect(g, n)
        cover[y0:y1, x0:x1] += 1
    assert (cover == 1).all()


def test_foreground_examples():
    g = build_patch_grid(56, 56, 14, 2)
    quad = np.zeros((56, 56), bool)
    quad[:28, :28] = True
    assert foreground_vrts(g, mask=quad) == sorted(brute_force_foreground(g, quad)) == [0]
    assert foreground_vrts(g, mask=np.ones((56, 56), bool)) == [0, 1, 2, 3]
    assert foreground_vrts(g, box=(10, 10, 40, 40)) == [0, 1, 2, 3]


def test_box_touching_cell_edge_only_is_not_inside():
    g = build_patch_grid(56, 56, 14, 2)
    assert foreground_vrts(g, box=(0, 0, 28, 28)) == [0]


def test_foreground_errors():
    g = build_patch_grid(56, 56, 14, 2)
    with pytest.raises(EmptyRegionError):
        foreground_vrts(g, mask=np.zeros((56, 56), bool))
    with pytest.raises(EmptyRegionError):
        foreground_vrts(g, box=(10, 10, 10, 20))
    with pytest.raises(DimensionError):
        foreground_vrts(g, mask=np.ones((28, 28), bool))


def test_vocab_id_bijection():
    for v in range(500, 536):
        assert vrt_to_vocab(vocab_to_vrt(v, 500, 36), 500) == v
    with pytest.raises(IndexError):
        vocab_to_vrt(536, 500, 36)


masks = st.builds(
    lambda seed, p: np.random.default_rng(seed).random((48, 48)) < p,
    st.integers(0, 2**31 - 1),
    st.floats(0.001, 0.05),
)


@settings(max_examples=80, deadline=None)
@given(masks, st.integers(0, 2**31 - 1))
def test_foreground_properties(mask, seed):
    g = build_patch_grid(48, 48, 4, 2)
    if not mask.any():
        mask[5, 7] = True
    fg = set(foreground_vrts(g, mask=mask))
    assert fg == brute_force_foreground(g, mask)
    # enlarging the mask never drops cells
    bigger = mask | (np.random.default_rng(seed).random(mask.shape) < 0.02)
    assert fg <= set(foreground_vrts(g, mask=bigger))
    # mask cells are a subset of its bounding-box cells
    ys, xs = np.nonzero(mask)
    box = (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    assert fg <= set(foreground_vrts(g, box=box))
