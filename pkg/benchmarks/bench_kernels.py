"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""
import argparse
import timeit

import numpy as np

from unlearn_forge import _pykernels

try:
    from unlearn_forge import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    out = {}
    for n in (32, 128, 512):
        a = rng.integers(0, 256, n).astype(np.int64)
        b = rng.integers(0, 256, n).astype(np.int64)
        out[f"lcs n={n}"] = (lambda a=a, b=b: _pykernels.lcs_length(a.tolist(), b.tolist()),
                             lambda a=a, b=b: _ckernels.lcs_length(a, b))
    for n in (100, 10_000):
        a, b = np.sort(rng.normal(size=n)), np.sort(rng.normal(0.1, 1, size=n))
        out[f"ks n={n}"] = (lambda a=a, b=b: _pykernels.ks_statistic(a.tolist(), b.tolist()),
                            lambda a=a, b=b: _ckernels.ks_statistic(a, b))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':<14s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, (py, cy) in cases(rng).items():
        n = 3
        t_py = min(timeit.repeat(py, number=n, repeat=args.repeats)) / n * 1e3
        if _ckernels is None:
            print(f"{name:<14s} {t_py:10.3f} {'n/a':>10s}")
            continue
        assert py() == cy()
        t_cy = min(timeit.repeat(cy, number=n, repeat=args.repeats)) / n * 1e3
        print(f"{name:<14s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
