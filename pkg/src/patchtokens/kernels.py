"""Pixel-level inner loops: polygon fill, COCO-style RLE, per-cell hit tests.

Every kernel exists twice: a numba loop (``*_jit``) and a vectorised numpy
version (``*_numpy``).  The public name binds to one of them at import time
according to :data:`patchtokens._accel.USE_JIT`.  Both paths must produce
identical outputs; ``tests/test_kernels.py`` enforces that.
"""

import numpy as np

from ._accel import USE_JIT, njit

__all__ = ["fill_polygon", "rle_encode", "rle_decode", "cell_hits", "USE_JIT"]


# --------------------------------------------------------------------------
# polygon fill (even-odd rule, sampled at pixel centres)


def _fill_polygon_numpy(h: int, w: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5
    inside = np.zeros((h, w), dtype=np.bool_)
    n = xs.shape[0]
    for i in range(n):
        x1, y1 = xs[i], ys[i]
        x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        rows = np.nonzero(crosses)[0]
        xint = x1 + (py[rows] - y1) * (x2 - x1) / (y2 - y1)
        inside[rows] ^= xint[:, None] > px[None, :]
    return inside


@njit
def _fill_polygon_jit(h, w, xs, ys):
    inside = np.zeros((h, w), dtype=np.bool_)
    n = xs.shape[0]
    for r in range(h):
        yc = r + 0.5
        for i in range(n):
            x1 = xs[i]
            y1 = ys[i]
            j = (i + 1) % n
            x2 = xs[j]
            y2 = ys[j]
            if (y1 > yc) != (y2 > yc):
                xint = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
                for c in range(w):
                    if xint > c + 0.5:
                        inside[r, c] = not inside[r, c]
    return inside


# --------------------------------------------------------------------------
# run-length encoding, column-major, counts start with a run of zeros


def _rle_encode_numpy(mask: np.ndarray) -> np.ndarray:
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    if flat.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).astype(np.int64)
    if flat[0] == 1:
        counts = np.concatenate(([0], counts))
    return counts


@njit
def _rle_encode_jit(mask):
    h, w = mask.shape
    out = np.zeros(h * w + 1, dtype=np.int64)
    k = 0
    cur = 0
    run = 0
    for c in range(w):
        for r in range(h):
            v = 1 if mask[r, c] else 0
            if v != cur:
                out[k] = run
                k += 1
                run = 0
                cur = v
            run += 1
    if h * w > 0:
        out[k] = run
        k += 1
    return out[:k]


def _rle_decode_numpy(counts: np.ndarray, h: int, w: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = (np.arange(counts.size) % 2).astype(np.bool_)
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


@njit
def _rle_decode_flat_jit(counts, n):
    flat = np.zeros(n, dtype=np.bool_)
    pos = 0
    val = False
    for i in range(counts.shape[0]):
        cnt = counts[i]
        if val:
            for j in range(pos, pos + cnt):
                flat[j] = True
        pos += cnt
        val = not val
    return flat


def _rle_decode_jit(counts: np.ndarray, h: int, w: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != h * w:
        raise ValueError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    return _rle_decode_flat_jit(counts, h * w).reshape((h, w), order="F")


# --------------------------------------------------------------------------
# which (cell_h x cell_w) cells of a mask contain at least one positive pixel


def _cell_hits_numpy(mask: np.ndarray, cell_h: int, cell_w: int) -> np.ndarray:
    h, w = mask.shape
    blocks = np.asarray(mask, dtype=np.bool_).reshape(h // cell_h, cell_h, w // cell_w, cell_w)
    return blocks.any(axis=(1, 3))


@njit
def _cell_hits_jit(mask, cell_h, cell_w):
    h, w = mask.shape
    rows = h // cell_h
    cols = w // cell_w
    out = np.zeros((rows, cols), dtype=np.bool_)
    for i in range(rows):
        for j in range(cols):
            hit = False
            for r in range(i * cell_h, (i + 1) * cell_h):
                for c in range(j * cell_w, (j + 1) * cell_w):
                    if mask[r, c]:
                        hit = True
                        break
                if hit:
                    break
            out[i, j] = hit
    return out


# --------------------------------------------------------------------------
# public entry points


def fill_polygon(h: int, w: int, xs, ys) -> np.ndarray:
    """Boolean (h, w) raster of a closed polygon; a pixel is in if its centre is."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("polygon xs/ys must be 1-D arrays of equal length")
    if xs.size < 3:
        return np.zeros((h, w), dtype=np.bool_)
    if USE_JIT:
        return _fill_polygon_jit(int(h), int(w), xs, ys)
    return _fill_polygon_numpy(int(h), int(w), xs, ys)


def rle_encode(mask) -> list[int]:
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    counts = _rle_encode_jit(mask) if USE_JIT else _rle_encode_numpy(mask)
    return [int(c) for c in counts]


def rle_decode(counts, h: int, w: int) -> np.ndarray:
    if USE_JIT:
        return _rle_decode_jit(counts, int(h), int(w))
    return _rle_decode_numpy(counts, int(h), int(w))


def cell_hits(mask, cell_h: int, cell_w: int) -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    h, w = mask.shape
    if h % cell_h or w % cell_w:
        raise ValueError(f"mask {mask.shape} is not tiled by {cell_h}x{cell_w} cells")
    if USE_JIT:
        return _cell_hits_jit(mask, int(cell_h), int(cell_w))
    return _cell_hits_numpy(mask, int(cell_h), int(cell_w))
