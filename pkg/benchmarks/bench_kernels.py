"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from pcnet import kernels
from pcnet.core import image_corners
from pcnet.geometry import solve_dlt


def cases(rng):
    img = rng.uniform(size=(3, 384, 384))
    c = image_corners(384, 384)
    m = solve_dlt(c, c + rng.uniform(-20, 20, size=(4, 2))).m
    pred = rng.uniform(size=(384, 384))
    gt = (rng.uniform(size=(384, 384)) > 0.6).astype(float)
    return {
        "warp_bilinear 3x384x384": lambda impl: impl.warp_bilinear(img, m, None),
        "s_measure 384x384": lambda impl: impl.s_measure(pred, gt, 0.5),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.backends()
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for backend, impl in sorted(impls.items()):
            times[backend] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        line = " ".join(f"{b}_ms={t * 1e3:.2f}" for b, t in times.items())
        if "cython" in times:
            line += f" speedup={times['python'] / times['cython']:.1f}"
        print(f"kernel={name.split()[0]} size={name.split()[1]} {line}")


if __name__ == "__main__":
    main()
