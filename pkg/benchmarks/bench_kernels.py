"""Time the numba and numpy forms of each hot kernel on the same inputs.

    python benchmarks/bench_kernels.py --n 200000 --repeat 5

Results are checked for equality before timing. The first numba call
(compilation, or cache load) is reported separately and excluded from
the steady-state numbers.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from mitovl import kernels
from mitovl._jit import USE_JIT


def make_inputs(n: int, n_slides: int, boxes_per_slide: int, seed: int):
    rng = np.random.default_rng(seed)
    size = 4000
    width = np.full(n, size, dtype=np.int64)
    height = np.full(n, size, dtype=np.int64)
    x0 = rng.integers(0, size - 50, n).astype(np.int64)
    y0 = rng.integers(0, size - 50, n).astype(np.int64)
    keys = kernels.derive_keys(seed, rng.integers(0, 2**63, n, dtype=np.uint64), 1)
    place = (x0, y0, x0 + 50, y0 + 50, width, height, keys, 224, 80, False)

    tile_slide = np.sort(rng.integers(0, n_slides, n)).astype(np.int64)
    tile_x = rng.integers(0, size - 224, n).astype(np.int64)
    tile_y = rng.integers(0, size - 224, n).astype(np.int64)
    nb = n_slides * boxes_per_slide
    offsets = np.arange(0, nb + 1, boxes_per_slide, dtype=np.int64)
    bx0 = rng.integers(0, size - 50, nb).astype(np.int64)
    by0 = rng.integers(0, size - 50, nb).astype(np.int64)
    hits = (tile_slide, tile_x, tile_y, 224, offsets, bx0, by0, bx0 + 50, by0 + 50)

    scores = np.round(rng.random(n), 3)  # rounding forces ties
    positive = rng.random(n) < 0.3
    mw = (scores, positive)
    return {"place_tiles": place, "tiles_hit_boxes": hits, "mann_whitney_u": mw}


PAIRS = {
    "place_tiles": (kernels._place_tiles_loop, kernels._place_tiles_numpy),
    "tiles_hit_boxes": (kernels._tiles_hit_boxes_loop, kernels._tiles_hit_boxes_numpy),
    "mann_whitney_u": (kernels._mann_whitney_u_loop, kernels._mann_whitney_u_numpy),
}


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if np.ndim(a) == 0:
        return bool(np.isclose(a, b, rtol=1e-12, atol=0))
    return bool(np.array_equal(a, b))


def _time(fn, args, repeat: int) -> list[float]:
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        out.append(time.perf_counter() - t)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=200_000, help="tiles / annotations / scores per call")
    ap.add_argument("--slides", type=int, default=200)
    ap.add_argument("--boxes-per-slide", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--python", action="store_true", help="also time the uncompiled loops (slow)")
    args = ap.parse_args(argv)

    inputs = make_inputs(args.n, args.slides, args.boxes_per_slide, args.seed)
    print(f"n={args.n} slides={args.slides} boxes/slide={args.boxes_per_slide} "
          f"default backend={'numba' if USE_JIT else 'numpy'}")
    print(f"{'kernel':18s} {'first numba':>12s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}"
          + (f" {'python':>10s}" if args.python else ""))
    for name, (loop, vec) in PAIRS.items():
        a = inputs[name]
        t = time.perf_counter()
        r_loop = loop(*a)
        first = time.perf_counter() - t
        r_vec = vec(*a)
        if not _same(r_loop, r_vec):
            print(f"{name}: numba and numpy results differ")
            return 1
        t_loop = statistics.median(_time(loop, a, args.repeat))
        t_vec = statistics.median(_time(vec, a, args.repeat))
        line = f"{name:18s} {first * 1e3:10.1f}ms {t_loop * 1e3:8.2f}ms {t_vec * 1e3:8.2f}ms {t_vec / t_loop:7.1f}x"
        if args.python:
            py = getattr(loop, "py_func", loop)
            line += f" {statistics.median(_time(py, a, 1)) * 1e3:8.0f}ms"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
