"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--size N C H W]

Prints one row per kernel with the best-of-N time of each backend and the
speedup.  Results are checked for agreement before timing.
"""

import argparse
import sys
import timeit

import numpy as np

from plqsr import kernels


def cases(x, g):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols_shape = (c * 9, n * h * w)
    cols = np.random.default_rng(1).standard_normal(cols_shape).astype(x.dtype)
    return {
        "uniform_fq": lambda k: k.uniform_fq(x, -1.5, 2.0, 4),
        "uniform_bwd": lambda k: k.uniform_bwd(x, -1.5, 2.0, 4, g),
        "sym_fq": lambda k: k.sym_fq(x, 2.5, 4),
        "piecewise_fq": lambda k: k.piecewise_fq(x, -4.0, 5.0, 1.0, 4),
        "piecewise_bwd": lambda k: k.piecewise_bwd(x, -4.0, 5.0, 1.0, 4, g),
        "im2col": lambda k: k.im2col(xp, 3, 3, h, w),
        "col2im": lambda k: k.col2im(cols, n, c, h + 2, w + 2, 3, 3, h, w),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--size", type=int, nargs=4, default=(16, 16, 48, 48), metavar=("N", "C", "H", "W"))
    args = ap.parse_args(argv)

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the NumPy backend is available", file=sys.stderr)
        return 1
    cy, py = backends["cython"], backends["python"]
    rng = np.random.default_rng(0)
    x = (rng.standard_normal(args.size) * 3).astype(np.float32)
    g = rng.standard_normal(args.size).astype(np.float32)

    print(f"input {tuple(args.size)} float32, best of {args.repeat}")
    print(f"{'kernel':<15}{'cython ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for name, fn in cases(x, g).items():
        a, b = fn(cy), fn(py)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(u, v, rtol=1e-6, atol=1e-6)
        n = max(1, int(0.2 / max(timeit.timeit(lambda: fn(py), number=1), 1e-6)))
        t_cy = min(timeit.repeat(lambda: fn(cy), number=n, repeat=args.repeat)) / n * 1e3
        t_py = min(timeit.repeat(lambda: fn(py), number=n, repeat=args.repeat)) / n * 1e3
        print(f"{name:<15}{t_cy:>11.3f}{t_py:>11.3f}{t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
