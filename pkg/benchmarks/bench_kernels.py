"""Compare the compiled pair-distance kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--n 2000 5000] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from snfkit import _kernels_py
from snfkit import kernels


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, nargs="+", default=[1000, 2000, 5000])
    parser.add_argument("--dim", type=int, default=2)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'n':>6} {'kernel':>6} {'cython s':>10} {'python s':>10} {'speedup':>8} {'equal':>6}")
    for n in args.n:
        a = rng.standard_normal((n, args.dim))
        b = rng.standard_normal((n, args.dim)) + 0.5
        for label, fast, slow, inputs in (
            ("cross", kernels.cross_distance_sum, _kernels_py.cross_distance_sum, (a, b)),
            ("self", kernels.self_distance_sum, _kernels_py.self_distance_sum, (a,)),
        ):
            t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat))
            t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat))
            equal = fast(*inputs) == slow(*inputs)
            print(f"{n:>6} {label:>6} {t_fast:>10.4f} {t_slow:>10.4f} {t_slow / t_fast:>8.1f} {str(equal):>6}")


if __name__ == "__main__":
    main()
