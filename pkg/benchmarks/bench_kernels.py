"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row is the best of ``repeat`` runs; outputs are checked for equality
before timing.
"""

import argparse
import timeit

import numpy as np

from protoshape.kernels import backends, default_cell


def cases(rng):
    q = rng.uniform(-0.5, 0.5, (2048, 3))
    r = rng.uniform(-0.5, 0.5, (2048, 3))
    small_q, small_r = q[:512], r[:512]
    cell = default_cell(len(r))
    pix = rng.integers(0, 64 * 64, 4096)
    depth = rng.normal(size=4096)
    vol = rng.normal(size=(16, 16, 16, 16))
    cx = rng.integers(0, 64, (8, 512, 7))
    cy = rng.integers(0, 64, (8, 512, 7))
    px, py = rng.random((8, 512, 7)), rng.random((8, 512, 7))
    gs = rng.normal(size=8 * 64 * 64)
    return {
        "nn_brute 512x512": ("nn_brute", (small_q, small_r)),
        "nn_grid 2048x2048": ("nn_grid", (q, r, cell)),
        "fps 4096->128": ("fps", (np.concatenate([q, r]), 128, 0)),
        "zbuffer 4096 px": ("zbuffer", (pix, depth)),
        "im2col 16ch 16^3": ("im2col", (vol, 1)),
        "im2col 16ch 16^3 s2": ("im2col", (vol, 2)),
        "splat 8x512x7x7": ("splat", (cx, cy, px, py, 64, 64)),
        "splat_grad 8x512x7x7": ("splat_grad", (gs, cx, cy, px, py, 64, 64)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args()
    mods = backends()
    if "cython" not in mods:
        print("compiled kernels not built; run: python3 setup.py build_ext --inplace")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, (name, args_) in cases(rng).items():
        fns = {k: getattr(m, name) for k, m in mods.items()}
        if not _same(fns["numpy"](*args_), fns["cython"](*args_)):
            raise SystemExit(f"{label}: backends disagree")
        ms = {}
        for k, fn in fns.items():
            best = min(timeit.repeat(lambda: fn(*args_), repeat=args.repeat, number=args.number))
            ms[k] = best / args.number * 1e3
        print(f"{label:24s} {ms['numpy']:10.3f} {ms['cython']:10.3f} {ms['numpy'] / ms['cython']:7.1f}x")


if __name__ == "__main__":
    main()
