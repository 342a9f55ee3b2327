#!/usr/bin/env python3
"""Time the numba and numpy kernel backends on pipeline-sized inputs.

Both implementations are called directly, so one process compares them
regardless of ``DIRECT_PRETRAIN_NUMBA``. The first numba call (compilation)
is excluded from the timings.

    python benchmarks/bench_kernels.py --repeat 20
"""
import argparse
import timeit

import numpy as np

from direct_pretrain import kernels


def cases(rng):
    img = rng.uniform(0, 1, (480, 640, 3)).astype(np.float32)
    masks = (rng.random((8, 480, 640)) > 0.5).astype(np.uint8)
    # keep-ratio (1333, 800) upscale and an ImageNet-style 448 downscale
    up = (1.25, 1.25, 0.0, 0.0, 800, 800, 800, 800)
    down = (0.7, 0.93, 0.0, 0.0, 448, 448, 448, 448)
    xy = rng.uniform(0, 500, (300, 2))
    a = np.hstack([xy, xy + rng.uniform(5, 80, (300, 2))])
    xy = rng.uniform(0, 500, (100, 2))
    b = np.hstack([xy, xy + rng.uniform(5, 80, (100, 2))])
    ious = kernels.box_iou(a, b)
    ignore = rng.random(100) < 0.1
    thr = np.round(np.arange(0.5, 0.951, 0.05), 2)
    return {
        "bilinear 640x480 -> 800x800": (kernels._bilinear_nb, kernels._bilinear_np, (img,) + up),
        "bilinear 640x480 -> 448x448": (kernels._bilinear_nb, kernels._bilinear_np, (img,) + down),
        "nearest 8 masks -> 800x800": (kernels._nearest_nb, kernels._nearest_np, (masks,) + up),
        "box_iou 300x100": (kernels._box_iou_nb, kernels._box_iou_np, (a, b)),
        "greedy_match 300x100 x10 thr": (kernels._greedy_match_nb, kernels._greedy_match_np, (ious, ignore, thr)),
    }


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<32} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  agree")
    for name, (nb_fn, np_fn, fargs) in cases(rng).items():
        nb_out, np_out = nb_fn(*fargs), np_fn(*fargs)  # also compiles the numba path
        if isinstance(nb_out, tuple):
            agree = all(np.array_equal(x, y) for x, y in zip(nb_out, np_out))
        else:
            agree = np.allclose(nb_out, np_out, atol=1e-5)
        t_nb = best_of(nb_fn, fargs, args.repeat)
        t_np = best_of(np_fn, fargs, args.repeat)
        print(f"{name:<32} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.1f}x  {agree}")


if __name__ == "__main__":
    main()
