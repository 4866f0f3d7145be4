"""Time the Cython kernels against the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``.  Each line gives the best
of several repeats per call for both backends and the speed-up.
"""
import argparse
import timeit

import numpy as np

from pdm2 import _pykernels as py

try:
    from pdm2 import _ckernels as ck
except ImportError:  # extension not built
    ck = None


def cases(rng):
    # ToF: a 3200-sample record against a 120-sample pattern over an 800-sample window
    w = rng.normal(size=3200)
    r = rng.normal(size=120)
    yield "xcorr (800 lags x 120 taps)", lambda k: k.xcorr(w, r, 400, 1200)

    # BOSS: sliding DFT features over an 1600-sample segment
    x = rng.normal(size=1600)
    yield "window_features (L=50, 4 coefs)", lambda k: k.window_features(x, 50, 4, 1, True)

    # 1-NN: one query bag against 300 training bags
    bags = []
    for _ in range(300):
        n = int(rng.integers(20, 80))
        bags.append((np.sort(rng.choice(65536, n, replace=False)), rng.integers(1, 6, n)))
    indptr = np.r_[0, np.cumsum([len(c) for c, _ in bags])].astype(np.int64)
    codes = np.concatenate([c for c, _ in bags]).astype(np.int64)
    counts = np.concatenate([n for _, n in bags]).astype(np.int64)
    qc, qn = bags[0][0].astype(np.int64), bags[0][1].astype(np.int64)
    yield "bag_distances (300 bags)", lambda k: k.bag_distances(qc, qn, indptr, codes, counts)


def best_time(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    print(f"{'kernel':34s} {'python':>12s} {'cython':>12s} {'speed-up':>9s}")
    for name, call in cases(rng):
        t_py = best_time(lambda: call(py), a.repeat)
        if ck is None:
            print(f"{name:34s} {t_py * 1e6:10.1f}us {'n/a':>12s} {'n/a':>9s}")
            continue
        t_c = best_time(lambda: call(ck), a.repeat)
        print(f"{name:34s} {t_py * 1e6:10.1f}us {t_c * 1e6:10.1f}us {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
