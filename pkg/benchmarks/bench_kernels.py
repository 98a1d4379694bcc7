"""Time the compiled SGD kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from mergestab.kernels import get_backend


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases():
    rng = np.random.default_rng(0)
    n, p = 2000, 50
    X = rng.standard_normal((n, p))
    y = X @ rng.standard_normal(p)
    x0 = np.zeros(p)
    for K, b in ((1000, 4), (1000, 64)):
        idx = rng.integers(0, n, (K, b))
        lrs = np.full(K, 1e-3)
        yield f"least-squares d={p} K={K} b={b}", lambda k: k.sgd_least_squares(x0, X, y, idx, lrs, 0.0)

    pm, H, C = 10, 16, 4
    Xm = rng.standard_normal((n, pm))
    ym = rng.integers(0, C, n).astype(np.int64)
    d = H * pm + H + C * H + C
    xm = 0.1 * rng.standard_normal(d)
    for K, b in ((500, 8), (500, 64)):
        idx = rng.integers(0, n, (K, b))
        lrs = np.full(K, 0.05)
        yield (f"mlp d={d} K={K} b={b}",
               lambda k, idx=idx, lrs=lrs: k.sgd_mlp(xm, Xm, ym, idx, lrs, 0.0, pm, H, C))

    a, c = rng.standard_normal(100_000), rng.standard_normal(100_000)
    yield "squared distance d=1e5", lambda k: k.sq_dist(a, c)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    py = get_backend("python")
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled extension not built; nothing to compare")
        return 1
    print(f"{'case':<34}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, run in cases():
        tp = _best(lambda: run(py), args.repeat)
        tc = _best(lambda: run(cy), args.repeat)
        print(f"{name:<34}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
