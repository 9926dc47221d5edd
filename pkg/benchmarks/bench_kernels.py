"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also checks that both backends agree on every benchmarked call.
"""

import argparse
import timeit

import numpy as np

from snapunfold import _kernels_py, kernels


def cases(rng):
    x = rng.standard_normal((4, 32, 36, 36)).astype(np.float32)
    w = rng.standard_normal((32, 5, 5)).astype(np.float32)
    g = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    f = rng.random((8, 64, 64))
    return {
        "dw_forward 4x32x32x32 k5": lambda m: m.dw_forward(x, w, 1),
        "dw_backward_input": lambda m: m.dw_backward_input(g, w, 1, 36, 36),
        "dw_backward_weight": lambda m: m.dw_backward_weight(x, g, 5, 5, 1),
        "tv_dual 8x64x64 20 it": lambda m: m.tv_dual(f, 0.1, 20, 0.125),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fast = kernels.compiled()
    if fast is None:
        print("compiled extension not built; only the numpy backend is available")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if fast is None:
            print(f"{name:28s} {t_py:10.2f} {'-':>10s} {'-':>8s}")
            continue
        a, b = np.asarray(fn(_kernels_py)), np.asarray(fn(fast))
        scale = max(1.0, float(np.abs(a).max()))
        assert np.abs(a - b).max() <= 1e-4 * scale, f"{name}: backends disagree"
        t_cy = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
