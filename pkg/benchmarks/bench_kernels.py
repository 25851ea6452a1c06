"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N time for each backend and the
speedup of the compiled one. Outputs are checked for agreement before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from localdrop._backend import get_kernels
from localdrop.linalg import svd_batch


def cases(rng):
    svd_small = rng.standard_normal((512, 3, 3))
    svd_dense = rng.standard_normal((1, 256, 64))
    x = rng.standard_normal((64, 16, 16, 16))
    w = rng.standard_normal((16, 32, 3, 3))
    g = rng.standard_normal((64, 32, 14, 14))
    pool_in = rng.standard_normal((64, 32, 16, 16))
    seeds = rng.random((64 * 32, 14, 14)) < 0.02
    return {
        "svd 512x(3x3)": lambda k: svd_batch(svd_small, compute_uv=False, backend=k.BACKEND)[1],
        "svd 256x64": lambda k: svd_batch(svd_dense, compute_uv=False, backend=k.BACKEND)[1],
        "conv forward": lambda k: k.conv2d_valid_batch(x, w),
        "conv grad weight": lambda k: k.conv2d_grad_weight(x, g, 3, 3),
        "conv grad input": lambda k: k.conv2d_grad_input(g, w, 16, 16),
        "maxpool forward": lambda k: k.maxpool_forward(pool_in, 2)[0],
        "dropblock expand": lambda k: k.dropblock_expand(seeds, 3, 16, 16),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    try:
        fast = get_kernels("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    slow = get_kernels("python")
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        np.testing.assert_allclose(fn(fast), fn(slow), rtol=1e-9, atol=1e-9)
        t_slow = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat)) * 1e3
        t_fast = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_slow:>12.2f}{t_fast:>12.2f}{t_slow / t_fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
