"""Time the compiled and numpy kernel backends on layer-sized vectors.

    python benchmarks/bench_kernels.py [--sizes 1000 100000 1000000] [--reps 50]
"""

import argparse
import statistics
import time

import numpy as np

from gslab import _kernels_py

try:
    from gslab import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, reps):
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out) * 1e6


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    p.add_argument("--reps", type=int, default=50)
    args = p.parse_args(argv)
    backends = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'n':>10}" + "".join(f"{name + ' us':>14}" for name, _ in backends))
    for n in args.sizes:
        a = rng.standard_normal(n)
        b = rng.standard_normal(n)
        for kernel in ("project_out", "rescale_to", "clip_to_norm"):
            cells = []
            for _, mod in backends:
                fn = getattr(mod, kernel)
                call = (lambda: fn(a, 1.0)) if kernel == "clip_to_norm" else (lambda: fn(a, b))
                cells.append(_time(call, args.reps))
            print(f"{kernel:<14}{n:>10}" + "".join(f"{c:>14.1f}" for c in cells))


if __name__ == "__main__":
    main()
