"""Time the numba and numpy paths of every pixel kernel on scene-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]

JIT compile time is excluded (each kernel is called once before timing).
"""

import argparse
import json
import time

import numpy as np

from patchtokens import kernels as K
from patchtokens.data import generate_scene


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(size):
    _, ann = generate_scene(0, "toy")
    mask = np.zeros((size, size), bool)
    mask[size // 5 : size // 2, size // 3 : 4 * size // 5] = True
    mask[::7] ^= True
    counts = np.asarray(K._rle_encode_numpy(mask), dtype=np.int64)
    theta = np.linspace(0, 2 * np.pi, 40, endpoint=False)
    xs = size / 2 + size / 3 * np.cos(theta) * (1 + 0.2 * np.sin(5 * theta))
    ys = size / 2 + size / 3 * np.sin(theta)
    cell = size // 16
    return {
        "fill_polygon": (
            lambda: K._fill_polygon_numpy(size, size, xs, ys),
            lambda: K._fill_polygon_jit(size, size, xs, ys),
        ),
        "rle_encode": (lambda: K._rle_encode_numpy(mask), lambda: K._rle_encode_jit(mask)),
        "rle_decode": (
            lambda: K._rle_decode_numpy(counts, size, size),
            lambda: K._rle_decode_jit(counts, size, size),
        ),
        "cell_hits": (lambda: K._cell_hits_numpy(mask, cell, cell), lambda: K._cell_hits_jit(mask, cell, cell)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--sizes", type=int, nargs="*", default=[96, 512])
    ap.add_argument("--json")
    args = ap.parse_args()
    rows = []
    for size in args.sizes:
        for name, (np_fn, jit_fn) in cases(size).items():
            a, b = np_fn(), jit_fn()
            same = bool(np.array_equal(np.asarray(a), np.asarray(b)))
            t_np = _time(np_fn, args.repeat)
            t_jit = _time(jit_fn, args.repeat)
            rows.append(dict(kernel=name, size=size, numpy_us=t_np * 1e6, jit_us=t_jit * 1e6,
                             speedup=t_np / t_jit, identical=same))
    print(f"{'kernel':<14}{'size':>6}{'numpy us':>12}{'jit us':>10}{'speedup':>9}  same")
    for r in rows:
        print(f"{r['kernel']:<14}{r['size']:>6}{r['numpy_us']:>12.1f}{r['jit_us']:>10.1f}{r['speedup']:>9.2f}  {r['identical']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
