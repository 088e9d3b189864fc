"""Timing comparison of the compiled and pure-numpy residual kernels.

Run: python3 benchmarks/bench_kernels.py [--edges 32] [--cells 192] [--reps 20]
"""

import argparse
import time

import numpy as np

from trajengine.geometry import PinholeIntrinsics, so3_exp
from trajengine.kernels import _HAVE_NUMBA, _edge_terms_numba, _edge_terms_numpy


def make_inputs(edges, cells, seed=0):
    rng = np.random.default_rng(seed)
    R = np.stack([so3_exp(rng.normal(0, 0.05, 3)) for _ in range(edges)])
    t = rng.normal(0, 0.1, (edges, 3))
    pnorm = rng.uniform(-0.5, 0.5, (cells, 2))
    invd = rng.uniform(0.1, 1.0, (edges, cells))
    target = pnorm[None] * 120.0 + 64.0 + rng.normal(0, 1.0, (edges, cells, 2))
    return R, t, pnorm, invd, target


def bench(fn, args, reps):
    fn(*args)  # warm up (and trigger compilation for the jit path)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--edges", type=int, default=32)
    ap.add_argument("--cells", type=int, default=192)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()

    K = PinholeIntrinsics(120.0, 120.0, 64.0, 48.0, 128, 96)
    R, t, pnorm, invd, target = make_inputs(args.edges, args.cells)
    common = (R, t, pnorm, invd, target, K.fx, K.fy, K.cx, K.cy, 1e-6, True)

    t_np = bench(_edge_terms_numpy, common, args.reps)
    print(f"numpy backend: {t_np * 1e3:8.3f} ms/call "
          f"({args.edges} edges x {args.cells} cells)")
    if _HAVE_NUMBA:
        t_nb = bench(_edge_terms_numba, common, args.reps)
        print(f"numba backend: {t_nb * 1e3:8.3f} ms/call "
              f"(speedup {t_np / t_nb:.2f}x)")
        r1 = _edge_terms_numpy(*common)
        r2 = _edge_terms_numba(*common)
        worst = max(float(np.max(np.abs(np.asarray(a, dtype=np.float64)
                                        - np.asarray(b, dtype=np.float64))))
                    for a, b in zip(r1, r2))
        print(f"max backend disagreement: {worst:.3g}")
    else:
        print("numba backend: unavailable")


if __name__ == "__main__":
    main()
