"""Time the numba kernels against their numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and shape with the best-of-N wall time of each
path, the speedup, and the maximum absolute difference between outputs.
"""

import argparse
import time

import numpy as np

from voxequiv import kernels
from voxequiv._accel import HAVE_NUMBA


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def cases(rng):
    for n, cin, cout, size, stride in ((8, 2, 16, 16, 2), (8, 16, 32, 8, 2), (8, 32, 16, 8, 1), (4, 8, 16, 32, 2)):
        x = rng.standard_normal((n, cin, size, size, size))
        w = rng.standard_normal((cout, cin, 3, 3, 3))
        b = rng.standard_normal(cout)
        o = kernels.conv_out_size(size, stride)
        g = rng.standard_normal((n, cout, o, o, o))
        tag = f"N={n} C={cin}->{cout} L={size} s={stride}"
        yield "conv3d_forward", tag, kernels.conv3d_forward, (x, w, b, stride)
        yield "conv3d_backward", tag, kernels.conv3d_backward, (x, w, g, stride)
    for size, atoms in ((16, 5), (32, 20), (64, 40)):
        coords = rng.uniform(size * 0.3, size * 0.7, (atoms, 3))
        ch = rng.integers(0, 3, atoms)
        yield "splat_gaussians", f"L={size} atoms={atoms}", kernels.splat_gaussians, (coords, ch, 3, size, 1.0)
    for size in (16, 32):
        grid = rng.standard_normal((4, size, size, size))
        pts = rng.uniform(-1, size, (size ** 3, 3))
        yield "trilinear_sample", f"L={size} points={size ** 3}", kernels.trilinear_sample, (grid, pts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':18s} {'shape':32s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for name, tag, fn, fargs in cases(rng):
        t_np, out_np = best_time(lambda: fn.numpy_impl(*fargs), args.repeat)
        if HAVE_NUMBA:
            fn.numba_impl(*fargs)  # compile outside the timed region
            t_nb, out_nb = best_time(lambda: fn.numba_impl(*fargs), args.repeat)
            print(f"{name:18s} {tag:32s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.2f} {_maxdiff(out_np, out_nb):10.2e}")
        else:
            print(f"{name:18s} {tag:32s} {t_np:10.4f} {'-':>10s}")


if __name__ == "__main__":
    main()
